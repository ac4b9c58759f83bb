//! Per-step convergence signals: entropy, top-two margin, peak probability
//! and the saturation flag.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError};
use crate::stopper::StopConfig;

/// Slack allowed on the entropy bounds when validating precomputed signals.
pub const ENTROPY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("step index must be >= 1")]
    ZeroStep,
    #[error("entropy {value} outside [0, ln {vocab}]")]
    EntropyOutOfRange { value: f64, vocab: usize },
    #[error("margin {0} is negative or not finite")]
    BadMargin(f64),
    #[error("peak probability {0} outside (0, 1]")]
    BadPeak(f64),
    #[error("dt_seconds {0} is negative or not finite")]
    BadDuration(f64),
}

/// Everything the stopper needs to know about one decoding step.
///
/// `saturated` is never serialized; it is derived from `p_max` and the
/// active saturation threshold whenever a record is built or validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSignals {
    #[serde(rename = "t")]
    pub step: usize,
    #[serde(rename = "H")]
    pub entropy: f64,
    #[serde(rename = "M")]
    pub margin: f64,
    pub p_max: f64,
    #[serde(skip)]
    pub saturated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_id: Option<u32>,
    #[serde(
        rename = "dt_seconds",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub dt: Option<f64>,
}

impl StepSignals {
    pub fn with_token(mut self, token_id: Option<u32>) -> Self {
        self.token_id = token_id;
        self
    }

    pub fn with_dt(mut self, dt: Option<f64>) -> Self {
        self.dt = dt;
        self
    }
}

/// Sanitize raw logits and derive the step's signals.
pub fn extract<T>(raw: &[T], step: usize, cfg: &StopConfig) -> Result<StepSignals, SignalError>
where
    T: Copy + Into<f64>,
{
    if step == 0 {
        return Err(SignalError::ZeroStep);
    }
    let z = numerics::sanitize(raw, cfg.clip_band)?;
    let p = numerics::probabilities(&z);
    let p_max = numerics::peak_probability(&p);
    Ok(StepSignals {
        step,
        entropy: numerics::entropy(&p),
        margin: numerics::margin(&p),
        p_max,
        saturated: p_max >= cfg.saturation_threshold,
        token_id: None,
        dt: None,
    })
}

/// Check a precomputed record against its invariants and recompute the
/// saturation flag from `p_max`.
pub fn validate(
    mut signals: StepSignals,
    vocab: usize,
    cfg: &StopConfig,
) -> Result<StepSignals, SignalError> {
    if vocab < 2 {
        return Err(NumericsError::VocabTooSmall(vocab).into());
    }
    if signals.step == 0 {
        return Err(SignalError::ZeroStep);
    }
    let h = signals.entropy;
    let h_max = (vocab as f64).ln();
    if !(h >= -ENTROPY_SLACK && h <= h_max + ENTROPY_SLACK) {
        return Err(SignalError::EntropyOutOfRange { value: h, vocab });
    }
    if !(signals.margin.is_finite() && signals.margin >= 0.0) {
        return Err(SignalError::BadMargin(signals.margin));
    }
    if !(signals.p_max > 0.0 && signals.p_max <= 1.0) {
        return Err(SignalError::BadPeak(signals.p_max));
    }
    if let Some(dt) = signals.dt {
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(SignalError::BadDuration(dt));
        }
    }
    signals.saturated = signals.p_max >= cfg.saturation_threshold;
    Ok(signals)
}
