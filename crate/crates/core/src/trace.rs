//! Trace files.
//!
//! Two on-disk layouts, both little-endian / UTF-8:
//!
//! * **full-logit** (`.lsh`): `b"LSH1"`, `format_version: u16`, `vocab: u32`,
//!   `steps: u32`, `meta_len: u32`, `meta_len` bytes of JSON metadata, then
//!   `steps * vocab` raw (pre-sanitization) `f32` logits.
//! * **signal** (`.sig.jsonl`): one JSON object per line. The first line is
//!   the metadata header, every following line a step record with keys
//!   `t, H, M, p_max, token_id, dt_seconds` (absent optionals omitted).
//!
//! [`TraceReader`] streams either layout step by step; [`read_trace`] loads
//! a whole trace.

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{self, SignalError, StepSignals};
use crate::stopper::{HaltReason, StopConfig};

pub const MAGIC: [u8; 4] = *b"LSH1";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the metadata JSON in a full-logit file.
pub const FIXED_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("empty trace source")]
    Empty,
    #[error("bad magic bytes {0:02x?}: neither LSH1 nor a JSON header")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated trace: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing data after {expected} bytes")]
    TrailingBytes { expected: u64 },
    #[error("vocab size mismatch: header says {header}, metadata says {meta}")]
    VocabMismatch { header: usize, meta: usize },
    #[error("step {step} has {found} logits, vocab is {vocab}")]
    StepWidth {
        step: usize,
        found: usize,
        vocab: usize,
    },
    #[error("vocab size {0} is below 2")]
    VocabTooSmall(usize),
    #[error("non-contiguous steps: expected t={expected}, found t={found}")]
    NonContiguous { expected: usize, found: usize },
    #[error("metadata kind {meta:?} does not match payload kind {payload:?}")]
    KindMismatch { meta: TraceKind, payload: TraceKind },
    #[error("per-step {field} has {found} entries for {steps} steps")]
    SideChannelLength {
        field: &'static str,
        found: usize,
        steps: usize,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: invalid step record: {source}")]
    InvalidSignal { line: usize, source: SignalError },
    #[error("trace too large for the binary header: {0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    FullLogit,
    Signal,
}

/// Header metadata shared by both layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u16,
    pub kind: TraceKind,
    pub vocab_size: usize,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_snapshot: Option<StopConfig>,
    /// Stopping step observed when the trace was captured live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_reason: Option<HaltReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub synthetic: bool,
    /// Set when `dt_seconds` values were generated rather than measured.
    #[serde(default, skip_serializing_if = "is_false")]
    pub dt_fabricated: bool,
    /// Full-logit traces only: token chosen at each step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    /// Full-logit traces only: wall-clock seconds per step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_seconds: Option<Vec<f64>>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl TraceMeta {
    pub fn new(kind: TraceKind, vocab_size: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            vocab_size,
            model_id: String::new(),
            prompt_id: String::new(),
            config_snapshot: None,
            tau: None,
            halt_reason: None,
            answer_tokens: None,
            synthetic: false,
            dt_fabricated: false,
            token_ids: None,
            dt_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Steps {
    /// Raw logits, one `vocab_size` row per step.
    Logits(Vec<Vec<f32>>),
    Signals(Vec<StepSignals>),
}

impl Steps {
    pub fn len(&self) -> usize {
        match self {
            Steps::Logits(rows) => rows.len(),
            Steps::Signals(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TraceKind {
        match self {
            Steps::Logits(_) => TraceKind::FullLogit,
            Steps::Signals(_) => TraceKind::Signal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub steps: Steps,
}

impl Trace {
    pub fn check(&self) -> Result<(), TraceError> {
        let vocab = self.meta.vocab_size;
        if vocab < 2 {
            return Err(TraceError::VocabTooSmall(vocab));
        }
        if self.meta.kind != self.steps.kind() {
            return Err(TraceError::KindMismatch {
                meta: self.meta.kind,
                payload: self.steps.kind(),
            });
        }
        let n = self.steps.len();
        match &self.steps {
            Steps::Logits(rows) => {
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != vocab {
                        return Err(TraceError::StepWidth {
                            step: i + 1,
                            found: row.len(),
                            vocab,
                        });
                    }
                }
                check_side_channel("token_ids", self.meta.token_ids.as_ref().map(Vec::len), n)?;
                check_side_channel("dt_seconds", self.meta.dt_seconds.as_ref().map(Vec::len), n)?;
            }
            Steps::Signals(s) => {
                for (i, rec) in s.iter().enumerate() {
                    if rec.step != i + 1 {
                        return Err(TraceError::NonContiguous {
                            expected: i + 1,
                            found: rec.step,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Convert to a signal trace by running extraction on every step.
    /// Signal traces are returned unchanged.
    pub fn to_signals(&self, cfg: &StopConfig) -> Result<Trace, TraceError> {
        let rows = match &self.steps {
            Steps::Signals(_) => return Ok(self.clone()),
            Steps::Logits(rows) => rows,
        };
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let s = signals::extract(row, i + 1, cfg)
                .map_err(|source| TraceError::InvalidSignal {
                    line: i + 1,
                    source,
                })?
                .with_token(self.meta.token_ids.as_ref().map(|v| v[i]))
                .with_dt(self.meta.dt_seconds.as_ref().map(|v| v[i]));
            out.push(s);
        }
        let mut meta = self.meta.clone();
        meta.kind = TraceKind::Signal;
        meta.token_ids = None;
        meta.dt_seconds = None;
        Ok(Trace {
            meta,
            steps: Steps::Signals(out),
        })
    }
}

fn check_side_channel(
    field: &'static str,
    len: Option<usize>,
    steps: usize,
) -> Result<(), TraceError> {
    match len {
        Some(found) if found != steps => Err(TraceError::SideChannelLength {
            field,
            found,
            steps,
        }),
        _ => Ok(()),
    }
}

/// Serialize `trace` and return the number of bytes written.
pub fn write_trace<W: Write>(trace: &Trace, dest: W) -> Result<u64, TraceError> {
    trace.check()?;
    let mut dest = CountingWriter {
        inner: io::BufWriter::new(dest),
        count: 0,
    };
    match &trace.steps {
        Steps::Logits(rows) => {
            let meta = serde_json::to_vec(&trace.meta).map_err(json_out)?;
            let to_u32 = |v: usize, what: &str| {
                u32::try_from(v).map_err(|_| TraceError::TooLarge(format!("{what} = {v}")))
            };
            dest.write_all(&MAGIC)?;
            dest.write_all(&trace.meta.format_version.to_le_bytes())?;
            dest.write_all(&to_u32(trace.meta.vocab_size, "vocab")?.to_le_bytes())?;
            dest.write_all(&to_u32(rows.len(), "steps")?.to_le_bytes())?;
            dest.write_all(&to_u32(meta.len(), "metadata length")?.to_le_bytes())?;
            dest.write_all(&meta)?;
            for row in rows {
                for v in row {
                    dest.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Steps::Signals(steps) => {
            serde_json::to_writer(&mut dest, &trace.meta).map_err(json_out)?;
            dest.write_all(b"\n")?;
            for s in steps {
                serde_json::to_writer(&mut dest, s).map_err(json_out)?;
                dest.write_all(b"\n")?;
            }
        }
    }
    dest.flush()?;
    Ok(dest.count)
}

fn json_out(e: serde_json::Error) -> TraceError {
    TraceError::Io(io::Error::other(e))
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// One step as it comes off the reader.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRecord {
    Logits {
        step: usize,
        values: Vec<f32>,
        token_id: Option<u32>,
        dt: Option<f64>,
    },
    Signals(StepSignals),
}

impl StepRecord {
    pub fn step(&self) -> usize {
        match self {
            StepRecord::Logits { step, .. } => *step,
            StepRecord::Signals(s) => s.step,
        }
    }

    pub fn dt(&self) -> Option<f64> {
        match self {
            StepRecord::Logits { dt, .. } => *dt,
            StepRecord::Signals(s) => s.dt,
        }
    }

    /// Signals for this step; full-logit records are extracted with `cfg`.
    pub fn into_signals(self, cfg: &StopConfig) -> Result<StepSignals, SignalError> {
        match self {
            StepRecord::Logits {
                step,
                values,
                token_id,
                dt,
            } => Ok(signals::extract(&values, step, cfg)?
                .with_token(token_id)
                .with_dt(dt)),
            StepRecord::Signals(s) => Ok(s),
        }
    }
}

enum Body<R> {
    Binary {
        reader: R,
        steps: usize,
        next: usize,
        header_len: u64,
        buf: Vec<u8>,
        finished: bool,
    },
    Lines {
        reader: R,
        line_no: usize,
        next: usize,
        line: String,
        finished: bool,
    },
}

/// Streaming reader over either trace layout.
///
/// Signal records are validated against the trace's vocab size and the
/// given config's saturation threshold as they are read.
pub struct TraceReader<R> {
    meta: TraceMeta,
    cfg: StopConfig,
    body: Body<R>,
}

impl<R: Read> TraceReader<BufReader<R>> {
    /// Open with the trace's own config snapshot (or defaults) for validation.
    pub fn new(source: R) -> Result<Self, TraceError> {
        Self::open(BufReader::new(source), None)
    }

    pub fn with_config(source: R, cfg: &StopConfig) -> Result<Self, TraceError> {
        Self::open(BufReader::new(source), Some(cfg))
    }
}

impl<R: BufRead> TraceReader<R> {
    fn open(mut reader: R, cfg: Option<&StopConfig>) -> Result<Self, TraceError> {
        let first = reader.fill_buf()?;
        if first.is_empty() {
            return Err(TraceError::Empty);
        }
        if first[0] == b'{' {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let meta: TraceMeta =
                serde_json::from_str(line.trim_end()).map_err(|e| TraceError::Json {
                    line: 1,
                    message: e.to_string(),
                })?;
            check_meta(&meta, TraceKind::Signal)?;
            let cfg = cfg
                .cloned()
                .or_else(|| meta.config_snapshot.clone())
                .unwrap_or_default();
            return Ok(Self {
                meta,
                cfg,
                body: Body::Lines {
                    reader,
                    line_no: 1,
                    next: 1,
                    line,
                    finished: false,
                },
            });
        }

        let mut fixed = [0u8; FIXED_HEADER_LEN];
        let got = read_up_to(&mut reader, &mut fixed)?;
        if got < 4 || fixed[..4] != MAGIC {
            return Err(TraceError::BadMagic(fixed[..got.min(4)].to_vec()));
        }
        if got < FIXED_HEADER_LEN {
            return Err(TraceError::Truncated {
                expected: FIXED_HEADER_LEN as u64,
                actual: got as u64,
            });
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        let vocab = u32::from_le_bytes(fixed[6..10].try_into().unwrap()) as usize;
        let steps = u32::from_le_bytes(fixed[10..14].try_into().unwrap()) as usize;
        let meta_len = u32::from_le_bytes(fixed[14..18].try_into().unwrap()) as usize;
        if version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let header_len = (FIXED_HEADER_LEN + meta_len) as u64;
        let payload = (steps as u64) * (vocab as u64) * 4;
        let mut meta_bytes = vec![0u8; meta_len];
        let got = read_up_to(&mut reader, &mut meta_bytes)?;
        if got < meta_len {
            return Err(TraceError::Truncated {
                expected: header_len + payload,
                actual: (FIXED_HEADER_LEN + got) as u64,
            });
        }
        let meta: TraceMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| TraceError::Json {
                line: 0,
                message: e.to_string(),
            })?;
        if meta.vocab_size != vocab {
            return Err(TraceError::VocabMismatch {
                header: vocab,
                meta: meta.vocab_size,
            });
        }
        check_meta(&meta, TraceKind::FullLogit)?;
        check_side_channel("token_ids", meta.token_ids.as_ref().map(Vec::len), steps)?;
        check_side_channel("dt_seconds", meta.dt_seconds.as_ref().map(Vec::len), steps)?;
        let cfg = cfg
            .cloned()
            .or_else(|| meta.config_snapshot.clone())
            .unwrap_or_default();
        Ok(Self {
            meta,
            cfg,
            body: Body::Binary {
                reader,
                steps,
                next: 1,
                header_len,
                buf: vec![0u8; vocab * 4],
                finished: false,
            },
        })
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    /// Step count from the header; `None` for signal traces.
    pub fn declared_steps(&self) -> Option<usize> {
        match &self.body {
            Body::Binary { steps, .. } => Some(*steps),
            Body::Lines { .. } => None,
        }
    }

    fn next_binary(&mut self) -> Option<Result<StepRecord, TraceError>> {
        let Body::Binary {
            reader,
            steps,
            next,
            header_len,
            buf,
            finished,
        } = &mut self.body
        else {
            unreachable!()
        };
        if *finished {
            return None;
        }
        let vocab = self.meta.vocab_size;
        if *next > *steps {
            *finished = true;
            let mut probe = [0u8; 1];
            return match read_up_to(reader, &mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(TraceError::TrailingBytes {
                    expected: *header_len + (*steps as u64) * (vocab as u64) * 4,
                })),
                Err(e) => Some(Err(e.into())),
            };
        }
        let got = match read_up_to(reader, buf) {
            Ok(n) => n,
            Err(e) => {
                *finished = true;
                return Some(Err(e.into()));
            }
        };
        let row_bytes = (vocab as u64) * 4;
        if got < buf.len() {
            *finished = true;
            return Some(Err(TraceError::Truncated {
                expected: *header_len + (*steps as u64) * row_bytes,
                actual: *header_len + (*next as u64 - 1) * row_bytes + got as u64,
            }));
        }
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let i = *next - 1;
        *next += 1;
        Some(Ok(StepRecord::Logits {
            step: i + 1,
            values,
            token_id: self.meta.token_ids.as_ref().map(|v| v[i]),
            dt: self.meta.dt_seconds.as_ref().map(|v| v[i]),
        }))
    }

    fn next_line(&mut self) -> Option<Result<StepRecord, TraceError>> {
        let Body::Lines {
            reader,
            line_no,
            next,
            line,
            finished,
        } = &mut self.body
        else {
            unreachable!()
        };
        if *finished {
            return None;
        }
        loop {
            line.clear();
            *line_no += 1;
            match reader.read_line(line) {
                Ok(0) => {
                    *finished = true;
                    return None;
                }
                Ok(_) => {}
                Err(e) => {
                    *finished = true;
                    return Some(Err(e.into()));
                }
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        let at = *line_no;
        let fail = |finished: &mut bool, e| {
            *finished = true;
            Some(Err(e))
        };
        let rec: StepSignals = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(e) => {
                return fail(
                    finished,
                    TraceError::Json {
                        line: at,
                        message: e.to_string(),
                    },
                )
            }
        };
        if rec.step != *next {
            let expected = *next;
            return fail(
                finished,
                TraceError::NonContiguous {
                    expected,
                    found: rec.step,
                },
            );
        }
        match signals::validate(rec, self.meta.vocab_size, &self.cfg) {
            Ok(r) => {
                *next += 1;
                Some(Ok(StepRecord::Signals(r)))
            }
            Err(source) => fail(finished, TraceError::InvalidSignal { line: at, source }),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<StepRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.body {
            Body::Binary { .. } => self.next_binary(),
            Body::Lines { .. } => self.next_line(),
        }
    }
}

fn check_meta(meta: &TraceMeta, payload: TraceKind) -> Result<(), TraceError> {
    if meta.format_version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(meta.format_version));
    }
    if meta.kind != payload {
        return Err(TraceError::KindMismatch {
            meta: meta.kind,
            payload,
        });
    }
    if meta.vocab_size < 2 {
        return Err(TraceError::VocabTooSmall(meta.vocab_size));
    }
    Ok(())
}

/// Fill as much of `buf` as the source allows; returns bytes read.
fn read_up_to<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Read and validate a whole trace.
pub fn read_trace<R: Read>(source: R) -> Result<Trace, TraceError> {
    collect(TraceReader::new(source)?)
}

/// Like [`read_trace`], validating signal records against `cfg`.
pub fn read_trace_with<R: Read>(source: R, cfg: &StopConfig) -> Result<Trace, TraceError> {
    collect(TraceReader::with_config(source, cfg)?)
}

fn collect<R: BufRead>(reader: TraceReader<R>) -> Result<Trace, TraceError> {
    let meta = reader.meta().clone();
    let steps = match meta.kind {
        TraceKind::FullLogit => {
            let mut rows = Vec::with_capacity(reader.declared_steps().unwrap_or(0));
            for rec in reader {
                if let StepRecord::Logits { values, .. } = rec? {
                    rows.push(values);
                }
            }
            Steps::Logits(rows)
        }
        TraceKind::Signal => {
            let mut out = Vec::new();
            for rec in reader {
                if let StepRecord::Signals(s) = rec? {
                    out.push(s);
                }
            }
            Steps::Signals(out)
        }
    };
    Ok(Trace { meta, steps })
}
