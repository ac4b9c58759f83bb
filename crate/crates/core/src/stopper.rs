//! Streaming stopping rule.
//!
//! A [`Stopper`] consumes one [`StepSignals`] record per decoding step and
//! decides, online, whether the rationale should halt. State is constant
//! size: two rings of the last `window + 1` entropies and margins, the
//! reference entropy, and a ledger of the last `vote_span` plateau votes.
//!
//! Per step `t`:
//!
//! * the entropy slope `(H_t - H_{t-k}) / k` and margin improvement
//!   `M_t - M_{t-k}` are taken over raw step indices, saturated steps
//!   included;
//! * a non-saturated step with computable trends (`t > k`) casts a plateau
//!   vote: slope `>= -entropy_slack` and improvement `<= margin_slack`;
//! * the rule fires at the first `t >= max(min_length + warmup, window + vote_span)`
//!   where the ledger holds `vote_span` votes, at least `ceil(vote_span / 2)`
//!   of them pass, and `H_ref - H_t >= entropy_drop`, with `H_ref` the
//!   median of the first `window` entropies;
//! * otherwise generation is capped at `max_length`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::DEFAULT_CLIP_BAND;
use crate::ring::Ring;
use crate::signals::StepSignals;

/// Hyperparameters of the stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    /// Trend window `k`.
    pub window: usize,
    /// Number of recent non-saturated votes `L` consulted.
    pub vote_span: usize,
    /// Entropy slope slack `eps_H`.
    pub entropy_slack: f64,
    /// Margin improvement slack `delta_M`.
    pub margin_slack: f64,
    /// Minimum rationale length `m`.
    pub min_length: usize,
    /// Maximum rationale length `M`.
    pub max_length: usize,
    /// Extra warmup steps `w` added to `min_length`.
    pub warmup: usize,
    /// Peak probability at or above which a step is saturated.
    pub saturation_threshold: f64,
    /// Required entropy drop `gamma` below the reference entropy.
    pub entropy_drop: f64,
    /// Logit clip band `B`.
    pub clip_band: f64,
    /// Disable plateau voting: every stream runs to `max_length`.
    pub vanilla: bool,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            window: 8,
            vote_span: 5,
            entropy_slack: 0.005,
            margin_slack: 0.05,
            min_length: 64,
            max_length: 320,
            warmup: 8,
            saturation_threshold: 0.99,
            entropy_drop: 0.1,
            clip_band: DEFAULT_CLIP_BAND,
            vanilla: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("window must be >= 1")]
    ZeroWindow,
    #[error("vote_span must be >= 1")]
    ZeroVoteSpan,
    #[error("max_length must be >= 1")]
    ZeroMaxLength,
    #[error("{name} must be a positive finite number, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("entropy_drop must be finite and >= 0, got {0}")]
    BadEntropyDrop(f64),
    #[error("saturation_threshold must lie in (0, 1], got {0}")]
    BadSaturationThreshold(f64),
    #[error("min_length + warmup = {0} exceeds max_length = {1}")]
    WarmupPastCap(usize, usize),
    #[error("window + vote_span = {0} exceeds max_length = {1}")]
    VotingPastCap(usize, usize),
}

impl StopConfig {
    /// Same settings with plateau voting disabled.
    pub fn vanilla(mut self) -> Self {
        self.vanilla = true;
        self
    }

    /// Earliest step at which the plateau vote may halt generation.
    pub fn min_halt_step(&self) -> usize {
        (self.min_length + self.warmup).max(self.window + self.vote_span)
    }

    /// Votes needed out of a full ledger.
    pub fn votes_needed(&self) -> usize {
        self.vote_span.div_ceil(2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        if self.vote_span == 0 {
            return Err(ConfigError::ZeroVoteSpan);
        }
        if self.max_length == 0 {
            return Err(ConfigError::ZeroMaxLength);
        }
        for (name, value) in [
            ("entropy_slack", self.entropy_slack),
            ("margin_slack", self.margin_slack),
            ("clip_band", self.clip_band),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::NotPositive { name, value });
            }
        }
        if !(self.entropy_drop.is_finite() && self.entropy_drop >= 0.0) {
            return Err(ConfigError::BadEntropyDrop(self.entropy_drop));
        }
        if !(self.saturation_threshold > 0.0 && self.saturation_threshold <= 1.0) {
            return Err(ConfigError::BadSaturationThreshold(
                self.saturation_threshold,
            ));
        }
        let warm = self.min_length + self.warmup;
        if warm > self.max_length {
            return Err(ConfigError::WarmupPastCap(warm, self.max_length));
        }
        let span = self.window + self.vote_span;
        if span > self.max_length {
            return Err(ConfigError::VotingPastCap(span, self.max_length));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    PlateauVote,
    MaxLengthCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Halt { step: usize, reason: HaltReason },
}

impl Decision {
    pub fn is_halt(&self) -> bool {
        matches!(self, Decision::Halt { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StopError {
    #[error("expected step {expected}, got step {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("stream already halted at step {0}")]
    AlreadyHalted(usize),
    #[error("trends need {needed} recorded steps, have {have}")]
    TrendsUnavailable { have: usize, needed: usize },
}

/// One plateau vote. Saturated steps never pass.
pub fn plateau_test(
    entropy_slope: f64,
    margin_improvement: f64,
    saturated: bool,
    cfg: &StopConfig,
) -> bool {
    entropy_slope >= -cfg.entropy_slack && margin_improvement <= cfg.margin_slack && !saturated
}

/// Median; even-length input averages the two middle values.
pub(crate) fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    assert!(!v.is_empty(), "median of empty sequence");
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Streaming state for one generation stream.
#[derive(Debug, Clone)]
pub struct Stopper {
    cfg: StopConfig,
    step: usize,
    entropies: Ring<f64>,
    margins: Ring<f64>,
    reference_entropy: Option<f64>,
    ledger: Ring<(usize, bool)>,
    passing_votes: usize,
    decision: Decision,
}

impl Stopper {
    pub fn new(cfg: StopConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self {
            entropies: Ring::new(cfg.window + 1),
            margins: Ring::new(cfg.window + 1),
            ledger: Ring::new(cfg.vote_span),
            cfg,
            step: 0,
            reference_entropy: None,
            passing_votes: 0,
            decision: Decision::Continue,
        })
    }

    pub fn config(&self) -> &StopConfig {
        &self.cfg
    }

    /// Last step consumed (0 before the first feed).
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn reference_entropy(&self) -> Option<f64> {
        self.reference_entropy
    }

    /// `(H_t - H_{t-k}) / k` for the current step.
    pub fn entropy_slope(&self) -> Result<f64, StopError> {
        self.trend_endpoints(&self.entropies)
            .map(|(old, new)| (new - old) / self.cfg.window as f64)
    }

    /// `M_t - M_{t-k}` for the current step.
    pub fn margin_improvement(&self) -> Result<f64, StopError> {
        self.trend_endpoints(&self.margins)
            .map(|(old, new)| new - old)
    }

    fn trend_endpoints(&self, ring: &Ring<f64>) -> Result<(f64, f64), StopError> {
        match (ring.is_full(), ring.oldest(), ring.latest()) {
            (true, Some(old), Some(new)) => Ok((old, new)),
            _ => Err(StopError::TrendsUnavailable {
                have: ring.len(),
                needed: ring.capacity(),
            }),
        }
    }

    /// Retained `(step, vote)` pairs, oldest first.
    pub fn ledger(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.ledger.iter()
    }

    /// Bytes held by this state, inline plus heap. Fixed at construction.
    pub fn footprint_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
            + self.entropies.heap_bytes()
            + self.margins.heap_bytes()
            + self.ledger.heap_bytes()
    }

    /// Consume the next step and return the updated decision.
    pub fn feed(&mut self, signals: &StepSignals) -> Result<Decision, StopError> {
        if let Decision::Halt { step, .. } = self.decision {
            return Err(StopError::AlreadyHalted(step));
        }
        if signals.step != self.step + 1 {
            return Err(StopError::OutOfOrder {
                expected: self.step + 1,
                got: signals.step,
            });
        }
        let t = signals.step;
        self.step = t;
        self.entropies.push(signals.entropy);
        self.margins.push(signals.margin);

        if t == self.cfg.window {
            self.reference_entropy = Some(median(self.entropies.iter()));
        }

        if !signals.saturated && self.entropies.is_full() {
            let vote = plateau_test(
                self.entropy_slope()?,
                self.margin_improvement()?,
                false,
                &self.cfg,
            );
            if let Some((_, true)) = self.ledger.push((t, vote)) {
                self.passing_votes -= 1;
            }
            if vote {
                self.passing_votes += 1;
            }
        }

        self.decision = if self.plateau_fires(signals.entropy) {
            Decision::Halt {
                step: t,
                reason: HaltReason::PlateauVote,
            }
        } else if t >= self.cfg.max_length {
            Decision::Halt {
                step: self.cfg.max_length,
                reason: HaltReason::MaxLengthCap,
            }
        } else {
            Decision::Continue
        };
        Ok(self.decision)
    }

    fn plateau_fires(&self, entropy: f64) -> bool {
        if self.cfg.vanilla || self.step < self.cfg.min_halt_step() || !self.ledger.is_full() {
            return false;
        }
        if self.passing_votes < self.cfg.votes_needed() {
            return false;
        }
        match self.reference_entropy {
            Some(h_ref) => h_ref - entropy >= self.cfg.entropy_drop,
            None => false,
        }
    }

    /// Feed steps until a halt or until the input runs out.
    pub fn run<'a, I>(cfg: StopConfig, steps: I) -> Result<Decision, RunError>
    where
        I: IntoIterator<Item = &'a StepSignals>,
    {
        let mut stopper = Stopper::new(cfg)?;
        for s in steps {
            if stopper.feed(s)?.is_halt() {
                break;
            }
        }
        Ok(stopper.decision())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stop(#[from] StopError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(step: usize, entropy: f64, margin: f64) -> StepSignals {
        StepSignals {
            step,
            entropy,
            margin,
            p_max: 0.5,
            saturated: false,
            token_id: None,
            dt: None,
        }
    }

    fn small_cfg() -> StopConfig {
        StopConfig {
            min_length: 8,
            warmup: 0,
            max_length: 64,
            ..StopConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let cfg = StopConfig::default();
        assert_eq!(cfg.window, 8);
        assert_eq!(cfg.vote_span, 5);
        assert_eq!(cfg.entropy_slack, 0.005);
        assert_eq!(cfg.margin_slack, 0.05);
        assert_eq!(cfg.min_length, 64);
        assert_eq!(cfg.max_length, 320);
        assert_eq!(cfg.min_halt_step(), 72);
        assert_eq!(cfg.votes_needed(), 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let bad = |f: fn(&mut StopConfig)| {
            let mut c = StopConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert_eq!(bad(|c| c.window = 0), ConfigError::ZeroWindow);
        assert_eq!(bad(|c| c.vote_span = 0), ConfigError::ZeroVoteSpan);
        assert_eq!(bad(|c| c.max_length = 0), ConfigError::ZeroMaxLength);
        assert!(matches!(
            bad(|c| c.entropy_slack = 0.0),
            ConfigError::NotPositive { .. }
        ));
        assert!(matches!(
            bad(|c| c.margin_slack = -1.0),
            ConfigError::NotPositive { .. }
        ));
        assert!(matches!(
            bad(|c| c.clip_band = f64::INFINITY),
            ConfigError::NotPositive { .. }
        ));
        assert_eq!(
            bad(|c| c.entropy_drop = -0.1),
            ConfigError::BadEntropyDrop(-0.1)
        );
        assert_eq!(
            bad(|c| c.saturation_threshold = 0.0),
            ConfigError::BadSaturationThreshold(0.0)
        );
        assert_eq!(
            bad(|c| c.max_length = 70),
            ConfigError::WarmupPastCap(72, 70)
        );
        assert_eq!(
            bad(|c| {
                c.min_length = 0;
                c.warmup = 0;
                c.max_length = 12;
            }),
            ConfigError::VotingPastCap(13, 12)
        );
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 3.0, 2.0].into_iter()), 2.5);
        assert_eq!(median([7.0].into_iter()), 7.0);
    }

    fn stopper_after(entropies: &[f64], margins: &[f64]) -> Stopper {
        let mut s = Stopper::new(StopConfig::default()).unwrap();
        for (i, (&h, &m)) in entropies.iter().zip(margins).enumerate() {
            s.feed(&sig(i + 1, h, m)).unwrap();
        }
        s
    }

    #[test]
    fn entropy_slope_examples() {
        let s = stopper_after(&[1.0; 9], &[0.0; 9]);
        assert_eq!(s.entropy_slope().unwrap(), 0.0);

        let mut h = vec![2.0];
        h.extend([1.5; 7]);
        h.push(1.2);
        let s = stopper_after(&h, &[0.0; 9]);
        assert!((s.entropy_slope().unwrap() + 0.1).abs() < 1e-12);

        let mut h = vec![1.0; 8];
        h.push(1.4);
        let s = stopper_after(&h, &[0.0; 9]);
        assert!((s.entropy_slope().unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn margin_improvement_examples() {
        let s = stopper_after(&[1.0; 9], &[0.3; 9]);
        assert_eq!(s.margin_improvement().unwrap(), 0.0);

        let mut m = vec![0.2; 8];
        m.push(0.9);
        let s = stopper_after(&[1.0; 9], &m);
        assert!((s.margin_improvement().unwrap() - 0.7).abs() < 1e-12);

        let mut m = vec![0.9; 8];
        m.push(0.2);
        let s = stopper_after(&[1.0; 9], &m);
        assert!((s.margin_improvement().unwrap() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn trends_unavailable_before_window() {
        let s = stopper_after(&[1.0; 8], &[0.0; 8]);
        assert_eq!(
            s.entropy_slope(),
            Err(StopError::TrendsUnavailable { have: 8, needed: 9 })
        );
        assert!(s.margin_improvement().is_err());
        assert_eq!(s.ledger().count(), 0);
    }

    #[test]
    fn plateau_examples() {
        let cfg = StopConfig::default();
        assert!(plateau_test(0.0, 0.0, false, &cfg));
        assert!(!plateau_test(-0.1, 0.0, false, &cfg));
        assert!(!plateau_test(0.0, 0.0, true, &cfg));
        assert!(!plateau_test(0.0, 0.06, false, &cfg));
        assert!(plateau_test(-0.005, 0.05, false, &cfg));
    }

    #[test]
    fn reference_entropy_set_at_window() {
        let s = stopper_after(&[5.0, 1.0, 2.0, 3.0, 4.0, 6.0, 7.0], &[0.0; 7]);
        assert_eq!(s.reference_entropy(), None);
        let s = stopper_after(&[5.0, 1.0, 2.0, 3.0, 4.0, 6.0, 7.0, 8.0, 0.0], &[0.0; 9]);
        assert_eq!(s.reference_entropy(), Some(4.5));
    }

    #[test]
    fn step_function_trace_halts_at_19() {
        // H = ln 4 for steps 1..=8, then the entropy of softmax([2,1,0,0]);
        // margin 0 then 1. Votes pass from step 17 on; the third pass is 19.
        let h_low = 1.048_705_102_545_686;
        let cfg = small_cfg();
        let steps: Vec<StepSignals> = (1..=64)
            .map(|t| {
                if t <= 8 {
                    sig(t, 4f64.ln(), 0.0)
                } else {
                    sig(t, h_low, 1.0)
                }
            })
            .collect();
        assert_eq!(
            Stopper::run(cfg, &steps).unwrap(),
            Decision::Halt {
                step: 19,
                reason: HaltReason::PlateauVote
            }
        );
    }

    #[test]
    fn vanilla_runs_to_cap() {
        let steps: Vec<StepSignals> = (1..=400).map(|t| sig(t, 0.1, 0.0)).collect();
        let mut cfg = small_cfg();
        cfg.entropy_drop = 0.0;
        assert!(matches!(
            Stopper::run(cfg.clone(), &steps).unwrap(),
            Decision::Halt {
                reason: HaltReason::PlateauVote,
                ..
            }
        ));
        assert_eq!(
            Stopper::run(cfg.vanilla(), &steps).unwrap(),
            Decision::Halt {
                step: 64,
                reason: HaltReason::MaxLengthCap
            }
        );
    }

    #[test]
    fn steady_descent_hits_cap() {
        let steps: Vec<StepSignals> = (1..=320)
            .map(|t| sig(t, 100.0 - 0.2 * t as f64, 0.2 * t as f64))
            .collect();
        let mut s = Stopper::new(StopConfig::default()).unwrap();
        let mut last = Decision::Continue;
        for step in &steps {
            last = s.feed(step).unwrap();
            if last.is_halt() {
                break;
            }
            if s.ledger().count() > 0 {
                assert!(s.ledger().all(|(_, v)| !v));
            }
        }
        assert_eq!(
            last,
            Decision::Halt {
                step: 320,
                reason: HaltReason::MaxLengthCap
            }
        );
    }

    #[test]
    fn protocol_errors() {
        let mut s = Stopper::new(small_cfg()).unwrap();
        assert_eq!(
            s.feed(&sig(2, 1.0, 0.0)),
            Err(StopError::OutOfOrder {
                expected: 1,
                got: 2
            })
        );
        for t in 1..=64 {
            s.feed(&sig(t, 1.0, 0.0)).unwrap();
        }
        assert_eq!(
            s.feed(&sig(65, 1.0, 0.0)),
            Err(StopError::AlreadyHalted(64))
        );
    }

    #[test]
    fn ledger_skips_saturated_and_stays_bounded() {
        let mut s = Stopper::new(StopConfig::default()).unwrap();
        for t in 1..=60 {
            let mut r = sig(t, 2.0, 0.1);
            r.saturated = t % 3 == 0;
            s.feed(&r).unwrap();
            assert!(s.ledger().count() <= 5);
            assert!(s.ledger().all(|(j, _)| j % 3 != 0 && j > 8));
        }
    }

    #[test]
    fn footprint_is_constant() {
        let mut s = Stopper::new(StopConfig {
            max_length: 20_000,
            ..StopConfig::default()
        })
        .unwrap();
        let before = s.footprint_bytes();
        for t in 1..=10_000 {
            s.feed(&sig(t, 3.0, 0.0)).unwrap();
        }
        assert_eq!(s.footprint_bytes(), before);
    }
}
