//! Seeded synthetic traces with controlled convergence behaviour.
//!
//! Regimes:
//!
//! * `converging`: entropy decays exponentially toward an asymptote while the
//!   margin rises and flattens. Expected to halt on the plateau vote.
//! * `plateau`: entropy and margin flat from step 1. The entropy-drop gate
//!   never opens, so the stream runs to the length cap.
//! * `noisy`: `converging` with Gaussian jitter on entropy and margin, sized
//!   against the default slacks.
//! * `saturating`: `converging` interrupted by periodic runs of
//!   near-deterministic steps (`p_max` above the default saturation
//!   threshold).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::StepSignals;
use crate::trace::{Steps, Trace, TraceKind, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Converging,
    Plateau,
    Noisy,
    Saturating,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Converging,
        Regime::Plateau,
        Regime::Noisy,
        Regime::Saturating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Converging => "converging",
            Regime::Plateau => "plateau",
            Regime::Noisy => "noisy",
            Regime::Saturating => "saturating",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| SynthError::UnknownRegime(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("unknown regime {0:?}")]
    UnknownRegime(String),
    #[error("steps must be >= 1")]
    NoSteps,
    #[error("vocab must be >= 2, got {0}")]
    VocabTooSmall(usize),
    #[error("{name} must be finite and non-negative, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("saturation_period must be >= 1 and saturation_run < saturation_period")]
    BadSaturationRuns,
}

/// Generator parameters. Optional levels default from the vocab size.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: Regime,
    pub steps: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Starting entropy in nats. Default `min(3, 0.9 ln V)`.
    pub initial_entropy: Option<f64>,
    /// Asymptotic entropy. Default `0.3 * initial_entropy`.
    pub final_entropy: Option<f64>,
    /// Per-step exponential decay rate of the entropy gap.
    pub decay_rate: f64,
    /// Asymptotic margin in nats.
    pub final_margin: f64,
    /// Standard deviation of entropy jitter; margin jitter is twice this.
    pub noise_scale: f64,
    /// A saturated run starts every `saturation_period` steps.
    pub saturation_period: usize,
    pub saturation_run: usize,
    /// Fabricated constant per-step wall-clock time.
    pub dt_seconds: Option<f64>,
}

impl SynthSpec {
    pub fn new(kind: Regime, steps: usize, vocab: usize, seed: u64) -> Self {
        Self {
            kind,
            steps,
            vocab,
            seed,
            initial_entropy: None,
            final_entropy: None,
            decay_rate: 0.02,
            final_margin: 2.5,
            noise_scale: if kind == Regime::Noisy { 0.01 } else { 0.0 },
            saturation_period: 12,
            saturation_run: 3,
            dt_seconds: None,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.steps == 0 {
            return Err(SynthError::NoSteps);
        }
        if self.vocab < 2 {
            return Err(SynthError::VocabTooSmall(self.vocab));
        }
        for (name, value) in [
            ("initial_entropy", self.initial_entropy.unwrap_or(0.0)),
            ("final_entropy", self.final_entropy.unwrap_or(0.0)),
            ("decay_rate", self.decay_rate),
            ("final_margin", self.final_margin),
            ("noise_scale", self.noise_scale),
            ("dt_seconds", self.dt_seconds.unwrap_or(0.0)),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SynthError::BadParameter { name, value });
            }
        }
        if self.kind == Regime::Saturating
            && (self.saturation_period == 0 || self.saturation_run >= self.saturation_period)
        {
            return Err(SynthError::BadSaturationRuns);
        }
        Ok(())
    }

    fn levels(&self) -> (f64, f64) {
        let h_max = (self.vocab as f64).ln();
        let h0 = self
            .initial_entropy
            .unwrap_or(3.0f64.min(0.9 * h_max))
            .min(h_max);
        let h_inf = self.final_entropy.unwrap_or(0.3 * h0).min(h0);
        (h0, h_inf)
    }

    fn is_saturated_step(&self, t: usize) -> bool {
        self.kind == Regime::Saturating
            && t >= self.saturation_period
            && (t - self.saturation_period) % self.saturation_period < self.saturation_run
    }

    fn meta(&self, kind: TraceKind) -> TraceMeta {
        let mut meta = TraceMeta::new(kind, self.vocab);
        meta.model_id = "synthetic".into();
        meta.prompt_id = format!("{}-seed{}", self.kind, self.seed);
        meta.synthetic = true;
        meta.dt_fabricated = self.dt_seconds.is_some();
        meta
    }
}

const SATURATED_P_MAX: f64 = 0.995;
const SATURATED_ENTROPY: f64 = 0.03;
const SATURATED_MARGIN: f64 = 6.0;
/// Ceiling on `p_max` for ordinary steps, kept under the default threshold.
const ORDINARY_P_MAX: f64 = 0.95;

/// Generate a signal trace. Deterministic in `spec`.
pub fn synthesize(spec: &SynthSpec) -> Result<Trace, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h_max = (spec.vocab as f64).ln();
    let (h0, h_inf) = spec.levels();
    let plateau_margin = 0.2 * spec.final_margin;

    let mut steps = Vec::with_capacity(spec.steps);
    for t in 1..=spec.steps {
        let decay = (-spec.decay_rate * (t - 1) as f64).exp();
        let (mut h, mut m) = match spec.kind {
            Regime::Plateau => (h0, plateau_margin),
            _ => (
                h_inf + (h0 - h_inf) * decay,
                spec.final_margin * (1.0 - decay),
            ),
        };
        let jitter_h: f64 = rng.sample(StandardNormal);
        let jitter_m: f64 = rng.sample(StandardNormal);
        h += spec.noise_scale * jitter_h;
        m += 2.0 * spec.noise_scale * jitter_m;

        let (h, m, p_max) = if spec.is_saturated_step(t) {
            (
                SATURATED_ENTROPY.min(h_max),
                SATURATED_MARGIN,
                SATURATED_P_MAX,
            )
        } else {
            let h = h.clamp(0.0, h_max);
            // exp(-H) is a lower bound on the peak probability of any
            // distribution with entropy H
            (h, m.max(0.0), (-h).exp().clamp(1e-12, ORDINARY_P_MAX))
        };
        steps.push(StepSignals {
            step: t,
            entropy: h,
            margin: m,
            p_max,
            saturated: false,
            token_id: None,
            dt: spec.dt_seconds,
        });
    }
    Ok(Trace {
        meta: spec.meta(TraceKind::Signal),
        steps: Steps::Signals(steps),
    })
}

/// Generate a full-logit trace following the same regime shapes.
///
/// Logits are a fixed random direction scaled by an inverse temperature that
/// grows over time (shrinking entropy), plus per-step jitter for `noisy`, a
/// spiked winner on saturated steps, and occasional non-finite entries so
/// replay exercises sanitization.
pub fn synthesize_logits(spec: &SynthSpec) -> Result<Trace, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base: Vec<f64> = (0..spec.vocab)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let winner = base
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let jitter = Normal::new(0.0, spec.noise_scale * 10.0).expect("validated noise scale");
    let (start_scale, end_scale) = (0.3, 3.0);

    let mut rows = Vec::with_capacity(spec.steps);
    let mut token_ids = Vec::with_capacity(spec.steps);
    for t in 1..=spec.steps {
        let decay = (-spec.decay_rate * (t - 1) as f64).exp();
        let scale = match spec.kind {
            Regime::Plateau => start_scale,
            _ => end_scale - (end_scale - start_scale) * decay,
        };
        let mut row: Vec<f32> = base
            .iter()
            .map(|&g| (scale * g + jitter.sample(&mut rng)) as f32)
            .collect();
        if spec.is_saturated_step(t) {
            row[winner] += 40.0;
        }
        if spec.kind != Regime::Plateau && t % 17 == 0 {
            let slot = (t * 7) % spec.vocab;
            if slot != winner {
                row[slot] = if t % 34 == 0 { f32::INFINITY } else { f32::NAN };
            }
        }
        token_ids.push(winner as u32);
        rows.push(row);
    }
    let mut meta = spec.meta(TraceKind::FullLogit);
    meta.token_ids = Some(token_ids);
    meta.dt_seconds = spec.dt_seconds.map(|dt| vec![dt; spec.steps]);
    Ok(Trace {
        meta,
        steps: Steps::Logits(rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::write_trace;

    #[test]
    fn regime_names_roundtrip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert!("wobbly".parse::<Regime>().is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SynthSpec::new(Regime::Converging, 0, 10, 1);
        assert_eq!(synthesize(&s), Err(SynthError::NoSteps));
        s.steps = 5;
        s.vocab = 1;
        assert_eq!(synthesize(&s), Err(SynthError::VocabTooSmall(1)));
        s.vocab = 10;
        s.decay_rate = f64::NAN;
        assert!(matches!(
            synthesize(&s),
            Err(SynthError::BadParameter { .. })
        ));
        let mut s = SynthSpec::new(Regime::Saturating, 5, 10, 1);
        s.saturation_run = 12;
        assert_eq!(synthesize(&s), Err(SynthError::BadSaturationRuns));
    }

    #[test]
    fn seeded_determinism() {
        let spec = SynthSpec::new(Regime::Noisy, 320, 32000, 7);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_trace(&synthesize(&spec).unwrap(), &mut a).unwrap();
        write_trace(&synthesize(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 8, ..spec };
        let mut c = Vec::new();
        write_trace(&synthesize(&other).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn emitted_signals_are_in_range() {
        for kind in Regime::ALL {
            for vocab in [2, 4, 50, 32000] {
                let mut spec = SynthSpec::new(kind, 200, vocab, 3);
                spec.noise_scale = 0.5;
                let t = synthesize(&spec).unwrap();
                let Steps::Signals(s) = &t.steps else {
                    panic!()
                };
                let h_max = (vocab as f64).ln();
                for r in s {
                    assert!(r.entropy >= 0.0 && r.entropy <= h_max);
                    assert!(r.margin >= 0.0);
                    assert!(r.p_max > 0.0 && r.p_max <= 1.0);
                }
            }
        }
    }

    #[test]
    fn saturating_runs_are_placed() {
        let spec = SynthSpec::new(Regime::Saturating, 40, 100, 0);
        let sat: Vec<usize> = (1..=40).filter(|&t| spec.is_saturated_step(t)).collect();
        assert_eq!(sat, vec![12, 13, 14, 24, 25, 26, 36, 37, 38]);
    }

    #[test]
    fn logit_trace_shape() {
        let mut spec = SynthSpec::new(Regime::Saturating, 40, 16, 5);
        spec.dt_seconds = Some(0.02);
        let t = synthesize_logits(&spec).unwrap();
        t.check().unwrap();
        let Steps::Logits(rows) = &t.steps else {
            panic!()
        };
        assert!(rows[16].iter().any(|v| !v.is_finite()));
        assert_eq!(t.meta.dt_seconds.as_ref().unwrap().len(), 40);
    }
}
