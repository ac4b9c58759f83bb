//! Adaptive stopping for chain-of-thought decoding.
//!
//! Each decoding step's logits are reduced to an entropy, a top-two margin
//! and a peak probability ([`signals`]). A streaming [`stopper::Stopper`]
//! watches the windowed entropy slope and margin improvement and halts the
//! rationale once both have plateaued for a majority of recent steps and the
//! entropy has dropped far enough below its early reference level.
//!
//! [`trace`] and [`synth`] provide recorded and synthetic step sequences;
//! [`harness`] replays them and computes token and latency reductions
//! against the fixed-length baseline.

pub mod harness;
pub mod numerics;
pub mod oracle;
mod ring;
pub mod signals;
pub mod stopper;
pub mod synth;
pub mod trace;

pub use numerics::{Logits, NumericsError, ProbView};
pub use oracle::oracle_stop;
pub use signals::{SignalError, StepSignals};
pub use stopper::{ConfigError, Decision, HaltReason, StopConfig, StopError, Stopper};
pub use synth::{Regime, SynthSpec};
pub use trace::{read_trace, write_trace, Trace, TraceError, TraceKind, TraceMeta};
