//! Numerically stable kernels over one step's next-token logits.
//!
//! Every kernel here takes *sanitized* input. Sanitization is a separate,
//! explicit stage ([`sanitize`]) so that traces can store raw logits and
//! leave the clip band as a replay-time setting.

use thiserror::Error;

/// Default clip band for sanitized logits.
pub const DEFAULT_CLIP_BAND: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("logit vector has {0} entries, need at least 2")]
    VocabTooSmall(usize),
    #[error("clip band must be a positive finite number, got {0}")]
    InvalidBand(f64),
}

/// Sanitized logits: every entry finite and inside `[-B, B]`.
///
/// Values are held in `f64` whatever the source precision was.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Replace non-finite entries with zero, then clamp into `[-band, band]`.
pub fn sanitize<T>(raw: &[T], band: f64) -> Result<Logits, NumericsError>
where
    T: Copy + Into<f64>,
{
    if raw.len() < 2 {
        return Err(NumericsError::VocabTooSmall(raw.len()));
    }
    if !(band.is_finite() && band > 0.0) {
        return Err(NumericsError::InvalidBand(band));
    }
    let values = raw
        .iter()
        .map(|&v| {
            let v: f64 = v.into();
            if v.is_finite() {
                v.clamp(-band, band)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Logits(values))
}

/// Softmax and log-softmax of one sanitized logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbView {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

impl ProbView {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }
}

/// Max-subtracted softmax / log-softmax.
pub fn probabilities(z: &Logits) -> ProbView {
    let z = z.as_slice();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|&v| v - max).collect();
    let sum: f64 = shifted.iter().map(|&s| s.exp()).sum();
    let log_sum = sum.ln();
    let logprobs: Vec<f64> = shifted.iter().map(|&s| s - log_sum).collect();
    let probs = shifted.iter().map(|&s| s.exp() / sum).collect();
    ProbView { probs, logprobs }
}

/// Shannon entropy in nats. Zero-probability entries contribute nothing.
///
/// The result is clamped to `[0, ln V]`, the range the exact value lives in,
/// so rounding never pushes it outside.
pub fn entropy(p: &ProbView) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .zip(&p.logprobs)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lv)| -pv * lv)
        .sum();
    h.clamp(0.0, (p.vocab_size() as f64).ln())
}

/// Indices of the largest and second-largest entries. Ties go to the lower
/// index.
pub fn top_two(values: &[f64]) -> (usize, usize) {
    debug_assert!(values.len() >= 2);
    let (mut first, mut second) = if values[1] > values[0] {
        (1, 0)
    } else {
        (0, 1)
    };
    for (i, &v) in values.iter().enumerate().skip(2) {
        if v > values[first] {
            second = first;
            first = i;
        } else if v > values[second] {
            second = i;
        }
    }
    (first, second)
}

/// Gap between the two largest log-probabilities.
pub fn margin(p: &ProbView) -> f64 {
    let (a, b) = top_two(&p.logprobs);
    (p.logprobs[a] - p.logprobs[b]).max(0.0)
}

pub fn peak_probability(p: &ProbView) -> f64 {
    p.probs.iter().copied().fold(0.0, f64::max)
}
