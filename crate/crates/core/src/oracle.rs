//! Offline reference for the stopping rule.
//!
//! Recomputes every trend, vote and gate from the full step sequence with
//! plain index arithmetic and backward scans, sharing no state or helpers
//! with [`crate::stopper::Stopper`]. Quadratic in the trace length; meant for
//! tests and cross-checks, not for production decoding.

use crate::signals::StepSignals;
use crate::stopper::{Decision, HaltReason, StopConfig};

/// Decision the streaming stopper must reach on `trace`.
///
/// Returns [`Decision::Continue`] if the trace ends before any halt.
pub fn oracle_stop(trace: &[StepSignals], cfg: &StopConfig) -> Decision {
    let k = cfg.window;
    let span = cfg.vote_span;
    let cap = cfg.max_length;
    let t_min = std::cmp::max(cfg.min_length + cfg.warmup, k + span);

    // 1-based views
    let h = |t: usize| trace[t - 1].entropy;
    let m = |t: usize| trace[t - 1].margin;
    let sat = |t: usize| trace[t - 1].saturated;

    let vote = |j: usize| -> bool {
        let slope = (h(j) - h(j - k)) / k as f64;
        let improvement = m(j) - m(j - k);
        slope >= -cfg.entropy_slack && improvement <= cfg.margin_slack && !sat(j)
    };

    let reference = if trace.len() >= k {
        let mut first: Vec<f64> = (1..=k).map(h).collect();
        first.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(if k % 2 == 1 {
            first[k / 2]
        } else {
            (first[k / 2 - 1] + first[k / 2]) / 2.0
        })
    } else {
        None
    };

    for t in 1..=trace.len().min(cap) {
        if !cfg.vanilla && t >= t_min {
            // most recent `span` non-saturated steps with a full trend window
            let recent: Vec<usize> = (k + 1..=t).rev().filter(|&j| !sat(j)).take(span).collect();
            if recent.len() == span {
                let passing = recent.iter().filter(|&&j| vote(j)).count();
                let needed = span.div_ceil(2);
                let gate = reference.is_some_and(|r| r - h(t) >= cfg.entropy_drop);
                if passing >= needed && gate {
                    return Decision::Halt {
                        step: t,
                        reason: HaltReason::PlateauVote,
                    };
                }
            }
        }
        if t == cap {
            return Decision::Halt {
                step: cap,
                reason: HaltReason::MaxLengthCap,
            };
        }
    }
    Decision::Continue
}
