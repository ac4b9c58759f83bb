//! Replay and reporting.
//!
//! `replay` runs traces through a fresh [`Stopper`] each and reports the
//! stopping step against the fixed-length baseline (`tau = max_length`).
//! `analyze` aggregates existing replay reports or captured traces.
//!
//! Token reduction per trace is `100 * (1 - (tau + answer) / (M + answer))`;
//! latency reduction is `100 * (1 - sum(dt[1..=tau]) / sum(dt[1..=M]))`.
//! Corpus figures are means of the per-trace ratios. Replay latency is a
//! counterfactual taken from one trace's own step timings, not a paired run.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::SignalError;
use crate::stopper::{ConfigError, Decision, HaltReason, StopConfig, StopError, Stopper};
use crate::trace::{TraceError, TraceReader, MAGIC};

pub const REPORT_VERSION: u32 = 1;
pub const LATENCY_BASIS: &str = "counterfactual: per-trace step timings, not paired live runs";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    ConfigIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("step {step}: {source}")]
    Signal { step: usize, source: SignalError },
    #[error(transparent)]
    Stop(#[from] StopError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Parse a flat `key = value` config file. Omitted keys take defaults;
/// unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<StopConfig, String> {
    toml::from_str(text).map_err(|e| e.message().to_string())
}

pub fn load_config(path: &Path) -> Result<StopConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg = parse_config(&text).map_err(|message| HarnessError::ConfigParse {
        path: path.to_path_buf(),
        message,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    PlateauVote,
    MaxLengthCap,
    /// The trace ended before any halt.
    Exhausted,
}

impl From<HaltReason> for OutcomeKind {
    fn from(r: HaltReason) -> Self {
        match r {
            HaltReason::PlateauVote => OutcomeKind::PlateauVote,
            HaltReason::MaxLengthCap => OutcomeKind::MaxLengthCap,
        }
    }
}

impl OutcomeKind {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::PlateauVote => "plateau_vote",
            OutcomeKind::MaxLengthCap => "max_length_cap",
            OutcomeKind::Exhausted => "exhausted",
        }
    }
}

/// Result of replaying one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    /// Stopping step, or steps consumed for an exhausted trace.
    pub tau: usize,
    pub max_length: usize,
    pub trace_steps: usize,
    pub vocab_size: usize,
    pub answer_tokens: Option<usize>,
    pub baseline_tokens: usize,
    pub leash_tokens: usize,
    /// `None` for exhausted traces.
    pub token_reduction_pct: Option<f64>,
    pub latency_leash_s: Option<f64>,
    pub latency_baseline_s: Option<f64>,
    pub latency_reduction_pct: Option<f64>,
}

pub fn token_reduction_pct(leash_tokens: usize, baseline_tokens: usize) -> f64 {
    100.0 * (1.0 - leash_tokens as f64 / baseline_tokens as f64)
}

pub fn latency_reduction_pct(leash_s: f64, baseline_s: f64) -> Option<f64> {
    (baseline_s > 0.0).then(|| 100.0 * (1.0 - leash_s / baseline_s))
}

/// Running sum of step timings that goes `None` on the first missing value.
#[derive(Debug, Clone, Copy)]
struct DtSum(Option<f64>);

impl DtSum {
    fn add(&mut self, dt: Option<f64>) {
        self.0 = match (self.0, dt) {
            (Some(acc), Some(d)) => Some(acc + d),
            _ => None,
        };
    }
}

impl Outcome {
    #[allow(clippy::too_many_arguments)]
    fn build(
        kind: OutcomeKind,
        tau: usize,
        cfg: &StopConfig,
        trace_steps: usize,
        vocab_size: usize,
        answer_tokens: Option<usize>,
        latency_leash_s: Option<f64>,
        latency_baseline_s: Option<f64>,
    ) -> Self {
        let answer = answer_tokens.unwrap_or(0);
        let baseline_tokens = cfg.max_length + answer;
        let leash_tokens = tau + answer;
        let token_reduction_pct = (kind != OutcomeKind::Exhausted)
            .then(|| token_reduction_pct(leash_tokens, baseline_tokens));
        let latency_reduction_pct = match (latency_leash_s, latency_baseline_s) {
            (Some(l), Some(b)) => latency_reduction_pct(l, b),
            _ => None,
        };
        Self {
            kind,
            tau,
            max_length: cfg.max_length,
            trace_steps,
            vocab_size,
            answer_tokens,
            baseline_tokens,
            leash_tokens,
            token_reduction_pct,
            latency_leash_s,
            latency_baseline_s,
            latency_reduction_pct,
        }
    }
}

/// Replay one trace from any byte source.
///
/// The whole trace is read even after a halt so that corruption anywhere in
/// the file is reported and baseline timings cover `max_length` steps.
pub fn replay_source<R: Read>(source: R, cfg: &StopConfig) -> Result<Outcome, ReplayError> {
    let reader = TraceReader::with_config(source, cfg)?;
    let meta = reader.meta().clone();
    let mut stopper = Stopper::new(cfg.clone())?;
    let mut to_tau = DtSum(Some(0.0));
    let mut to_cap = DtSum(Some(0.0));
    let mut steps = 0;

    for rec in reader {
        let rec = rec?;
        steps += 1;
        let step = rec.step();
        if step <= cfg.max_length {
            to_cap.add(rec.dt());
        }
        if !stopper.decision().is_halt() {
            to_tau.add(rec.dt());
            let signals = rec
                .into_signals(cfg)
                .map_err(|source| ReplayError::Signal { step, source })?;
            stopper.feed(&signals)?;
        }
    }

    let (kind, tau) = match stopper.decision() {
        Decision::Halt { step, reason } => (reason.into(), step),
        Decision::Continue => (OutcomeKind::Exhausted, stopper.step()),
    };
    let baseline_s = if steps >= cfg.max_length {
        to_cap.0
    } else {
        None
    };
    let leash_s = baseline_s.and(to_tau.0);
    Ok(Outcome::build(
        kind,
        tau,
        cfg,
        steps,
        meta.vocab_size,
        meta.answer_tokens,
        leash_s,
        baseline_s,
    ))
}

pub fn replay_path(path: &Path, cfg: &StopConfig) -> Result<Outcome, ReplayError> {
    let file = File::open(path).map_err(TraceError::from)?;
    replay_source(file, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub traces_ok: usize,
    pub traces_failed: usize,
    pub mean_token_reduction_pct: Option<f64>,
    pub mean_latency_reduction_pct: Option<f64>,
    /// Traces contributing to the latency mean.
    pub latency_traces: usize,
    pub halt_reasons: BTreeMap<String, usize>,
    pub latency_basis: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub report_version: u32,
    pub config: StopConfig,
    pub traces: Vec<ReplayRow>,
    pub aggregate: Aggregate,
}

impl ReplayReport {
    /// 0 when every trace replayed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.aggregate.traces_failed == 0 {
            0
        } else {
            1
        }
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn vocab_warning(vocabs: impl IntoIterator<Item = usize>) -> Option<String> {
    let mut seen: Vec<usize> = vocabs.into_iter().collect();
    seen.sort_unstable();
    seen.dedup();
    (seen.len() > 1).then(|| format!("mixed vocab sizes in corpus: {seen:?}"))
}

pub fn aggregate_rows(rows: &[ReplayRow]) -> Aggregate {
    let outcomes: Vec<&Outcome> = rows.iter().filter_map(|r| r.outcome.as_ref()).collect();
    let mut halt_reasons = BTreeMap::new();
    for o in &outcomes {
        *halt_reasons.entry(o.kind.name().to_string()).or_insert(0) += 1;
    }
    let latencies: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.latency_reduction_pct)
        .collect();
    let mut warnings = Vec::new();
    warnings.extend(vocab_warning(outcomes.iter().map(|o| o.vocab_size)));
    let exhausted = outcomes
        .iter()
        .filter(|o| o.kind == OutcomeKind::Exhausted)
        .count();
    if exhausted > 0 {
        warnings.push(format!(
            "{exhausted} trace(s) ended before max_length without a halt; excluded from token reduction"
        ));
    }
    Aggregate {
        traces_ok: outcomes.len(),
        traces_failed: rows.len() - outcomes.len(),
        mean_token_reduction_pct: mean(outcomes.iter().filter_map(|o| o.token_reduction_pct)),
        mean_latency_reduction_pct: mean(latencies.iter().copied()),
        latency_traces: latencies.len(),
        halt_reasons,
        latency_basis: LATENCY_BASIS.to_string(),
        warnings,
    }
}

/// Replay every path in parallel. Rows come back sorted by trace id.
pub fn replay(paths: &[PathBuf], cfg: &StopConfig) -> ReplayReport {
    let mut rows: Vec<ReplayRow> = paths
        .par_iter()
        .map(|p| {
            let trace_id = p.display().to_string();
            match replay_path(p, cfg) {
                Ok(o) => ReplayRow {
                    trace_id,
                    outcome: Some(o),
                    error: None,
                },
                Err(e) => ReplayRow {
                    trace_id,
                    outcome: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let aggregate = aggregate_rows(&rows);
    ReplayReport {
        report_version: REPORT_VERSION,
        config: cfg.clone(),
        traces: rows,
        aggregate,
    }
}

/// One row of an `analyze` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRow {
    pub source: String,
    pub trace_id: String,
    pub tau: usize,
    pub max_length: usize,
    pub answer_tokens: Option<usize>,
    pub vocab_size: usize,
    pub token_reduction_pct: f64,
    pub latency_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeAggregate {
    pub rows: usize,
    pub inputs_failed: usize,
    pub mean_token_reduction_pct: Option<f64>,
    pub mean_latency_reduction_pct: Option<f64>,
    pub latency_traces: usize,
    pub latency_basis: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub report_version: u32,
    pub baseline_max_length: Option<usize>,
    pub rows: Vec<AnalyzeRow>,
    pub errors: Vec<String>,
    pub aggregate: AnalyzeAggregate,
}

impl AnalyzeReport {
    /// 0 when every input contributed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.errors.is_empty() && !self.rows.is_empty() {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("no inputs given")]
    NoInputs,
}

/// Rows from a replay report, re-based on `baseline` when given.
fn rows_from_report(
    source: &str,
    report: &ReplayReport,
    baseline: Option<usize>,
    warnings: &mut Vec<String>,
) -> Vec<AnalyzeRow> {
    let mut out = Vec::new();
    for row in &report.traces {
        let Some(o) = &row.outcome else {
            warnings.push(format!(
                "{source}: {} failed in replay, skipped",
                row.trace_id
            ));
            continue;
        };
        if o.kind == OutcomeKind::Exhausted {
            warnings.push(format!("{source}: {} has no halt, skipped", row.trace_id));
            continue;
        }
        let max_length = baseline.unwrap_or(o.max_length);
        let answer = o.answer_tokens.unwrap_or(0);
        // recorded latencies only hold for the cap they were replayed with
        let latency = if max_length == o.max_length {
            o.latency_reduction_pct
        } else {
            None
        };
        out.push(AnalyzeRow {
            source: source.to_string(),
            trace_id: row.trace_id.clone(),
            tau: o.tau.min(max_length),
            max_length,
            answer_tokens: o.answer_tokens,
            vocab_size: o.vocab_size,
            token_reduction_pct: token_reduction_pct(
                o.tau.min(max_length) + answer,
                max_length + answer,
            ),
            latency_reduction_pct: latency,
        });
    }
    out
}

/// A captured trace carrying its live stopping step in metadata.
fn row_from_trace(
    source: &str,
    bytes: &[u8],
    baseline: Option<usize>,
) -> Result<AnalyzeRow, String> {
    let reader = TraceReader::new(bytes).map_err(|e| e.to_string())?;
    let meta = reader.meta().clone();
    let tau = meta
        .tau
        .ok_or_else(|| "trace metadata records no tau".to_string())?;
    let max_length = baseline
        .or(meta.config_snapshot.as_ref().map(|c| c.max_length))
        .ok_or_else(|| "no baseline max length given or recorded".to_string())?;
    let tau = tau.min(max_length);
    let mut to_tau = DtSum(Some(0.0));
    let mut to_cap = DtSum(Some(0.0));
    let mut steps = 0;
    for rec in reader {
        let rec = rec.map_err(|e| e.to_string())?;
        steps += 1;
        if rec.step() <= tau {
            to_tau.add(rec.dt());
        }
        if rec.step() <= max_length {
            to_cap.add(rec.dt());
        }
    }
    let latency = match (to_tau.0, to_cap.0) {
        (Some(l), Some(b)) if steps >= max_length => latency_reduction_pct(l, b),
        _ => None,
    };
    let answer = meta.answer_tokens.unwrap_or(0);
    Ok(AnalyzeRow {
        source: source.to_string(),
        trace_id: if meta.prompt_id.is_empty() {
            source.to_string()
        } else {
            meta.prompt_id.clone()
        },
        tau,
        max_length,
        answer_tokens: meta.answer_tokens,
        vocab_size: meta.vocab_size,
        token_reduction_pct: token_reduction_pct(tau + answer, max_length + answer),
        latency_reduction_pct: latency,
    })
}

/// Aggregate prepared rows into corpus means.
pub fn aggregate_analysis(
    mut rows: Vec<AnalyzeRow>,
    errors: Vec<String>,
    mut warnings: Vec<String>,
    baseline: Option<usize>,
) -> AnalyzeReport {
    rows.sort_by(|a, b| (&a.source, &a.trace_id).cmp(&(&b.source, &b.trace_id)));
    warnings.extend(vocab_warning(rows.iter().map(|r| r.vocab_size)));
    let latencies: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.latency_reduction_pct)
        .collect();
    let aggregate = AnalyzeAggregate {
        rows: rows.len(),
        inputs_failed: errors.len(),
        mean_token_reduction_pct: mean(rows.iter().map(|r| r.token_reduction_pct)),
        mean_latency_reduction_pct: mean(latencies.iter().copied()),
        latency_traces: latencies.len(),
        latency_basis: LATENCY_BASIS.to_string(),
        warnings,
    };
    AnalyzeReport {
        report_version: REPORT_VERSION,
        baseline_max_length: baseline,
        rows,
        errors,
        aggregate,
    }
}

/// Aggregate replay reports and/or captured traces.
pub fn analyze(paths: &[PathBuf], baseline: Option<usize>) -> Result<AnalyzeReport, AnalyzeError> {
    if paths.is_empty() {
        return Err(AnalyzeError::NoInputs);
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let source = path.display().to_string();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) => {
                errors.push(format!("{source}: {e}"));
                continue;
            }
        };
        if !bytes.starts_with(&MAGIC) {
            if let Ok(report) = serde_json::from_slice::<ReplayReport>(&bytes) {
                rows.extend(rows_from_report(&source, &report, baseline, &mut warnings));
                continue;
            }
        }
        match row_from_trace(&source, &bytes, baseline) {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(format!("{source}: {e}")),
        }
    }
    Ok(aggregate_analysis(rows, errors, warnings, baseline))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::StepSignals;
    use crate::trace::{write_trace, Steps, Trace, TraceKind, TraceMeta};

    fn flat_trace(n: usize, dt: Option<f64>) -> Vec<u8> {
        let steps = (1..=n)
            .map(|t| StepSignals {
                step: t,
                entropy: 1.0,
                margin: 0.0,
                p_max: 0.4,
                saturated: false,
                token_id: None,
                dt,
            })
            .collect();
        let trace = Trace {
            meta: TraceMeta::new(TraceKind::Signal, 100),
            steps: Steps::Signals(steps),
        };
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        buf
    }

    #[test]
    fn config_parsing() {
        let cfg = parse_config("window = 4\nentropy_drop = 0\nvanilla = true\n").unwrap();
        assert_eq!(cfg.window, 4);
        assert_eq!(cfg.entropy_drop, 0.0);
        assert!(cfg.vanilla);
        assert_eq!(cfg.vote_span, 5);
        assert!(parse_config("windw = 4").is_err());
        assert!(parse_config("[section]\nwindow = 4").is_err());
    }

    #[test]
    fn reduction_arithmetic() {
        assert!((token_reduction_pct(208, 320) - 35.0).abs() < 1e-12);
        assert_eq!(token_reduction_pct(320, 320), 0.0);
        assert!((latency_reduction_pct(224.0 * 0.05, 320.0 * 0.05).unwrap() - 30.0).abs() < 1e-9);
        assert_eq!(latency_reduction_pct(1.0, 0.0), None);
        assert_eq!(mean([30.0, 40.0]), Some(35.0));
        assert_eq!(mean(std::iter::empty()), None);
    }

    #[test]
    fn flat_trace_caps_with_zero_reduction() {
        let o = replay_source(&flat_trace(320, Some(0.01))[..], &StopConfig::default()).unwrap();
        assert_eq!(o.kind, OutcomeKind::MaxLengthCap);
        assert_eq!(o.tau, 320);
        assert_eq!(o.token_reduction_pct, Some(0.0));
        assert_eq!(o.latency_reduction_pct, Some(0.0));
    }

    #[test]
    fn short_trace_is_exhausted() {
        let o = replay_source(&flat_trace(100, None)[..], &StopConfig::default()).unwrap();
        assert_eq!(o.kind, OutcomeKind::Exhausted);
        assert_eq!(o.tau, 100);
        assert_eq!(o.token_reduction_pct, None);
        assert_eq!(o.latency_baseline_s, None);
    }

    #[test]
    fn corrupt_tail_is_reported_after_halt() {
        let mut bytes = flat_trace(330, None);
        let text = String::from_utf8(bytes.clone()).unwrap();
        let broken = text.replacen(r#"{"t":325,"H":1.0"#, r#"{"t":325,"H":-1.0"#, 1);
        assert_ne!(broken, text);
        bytes = broken.into_bytes();
        assert!(replay_source(&bytes[..], &StopConfig::default()).is_err());
    }
}
