use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use leash::harness::{self, AnalyzeError};
use leash::synth::{self, Regime, SynthSpec};
use leash::trace::{self, TraceKind};
use leash::StopConfig;

const EXIT_PARTIAL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "leash",
    version,
    about = "Replay and analyze adaptive CoT stopping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run traces through the stopper and report stopping steps and reductions.
    Replay {
        /// Flat key = value config file; omitted keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable plateau voting (fixed-length baseline).
        #[arg(long)]
        vanilla: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Generate a synthetic trace (`.lsh` output writes full logits).
    Synth {
        #[arg(long)]
        kind: Regime,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        steps: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        vocab: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fabricated per-step wall-clock seconds.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        decay_rate: Option<f64>,
        #[arg(long)]
        initial_entropy: Option<f64>,
        #[arg(long)]
        final_entropy: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate replay reports or captured traces into corpus means.
    Analyze {
        /// Baseline maximum rationale length.
        #[arg(long)]
        max_length: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Convert a full-logit trace into a signal trace.
    Extract {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}

fn usage_error(msg: impl std::fmt::Display) -> Result<u8> {
    eprintln!("error: {msg}");
    Ok(EXIT_USAGE)
}

fn load_config(path: Option<&Path>) -> std::result::Result<StopConfig, harness::HarnessError> {
    match path {
        Some(p) => harness::load_config(p),
        None => Ok(StopConfig::default()),
    }
}

fn emit_json<T: Serialize>(value: &T, dest: Option<&Path>) -> Result<()> {
    match dest {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            serde_json::to_writer_pretty(f, value)?;
        }
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Replay {
            config,
            vanilla,
            report,
            traces,
        } => {
            let mut cfg = match load_config(config.as_deref()) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            cfg.vanilla |= vanilla;
            let rep = harness::replay(&traces, &cfg);
            for row in &rep.traces {
                if let Some(err) = &row.error {
                    eprintln!("{}: {err}", row.trace_id);
                }
            }
            for w in &rep.aggregate.warnings {
                eprintln!("warning: {w}");
            }
            emit_json(&rep, report.as_deref())?;
            Ok(rep.exit_code() as u8)
        }
        Command::Synth {
            kind,
            steps,
            vocab,
            seed,
            dt,
            noise,
            decay_rate,
            initial_entropy,
            final_entropy,
            out,
        } => {
            let mut spec = SynthSpec::new(kind, steps as usize, vocab as usize, seed);
            spec.dt_seconds = dt;
            spec.initial_entropy = initial_entropy;
            spec.final_entropy = final_entropy;
            if let Some(n) = noise {
                spec.noise_scale = n;
            }
            if let Some(r) = decay_rate {
                spec.decay_rate = r;
            }
            let full_logit = out.extension().is_some_and(|e| e == "lsh");
            let generated = if full_logit {
                synth::synthesize_logits(&spec)
            } else {
                synth::synthesize(&spec)
            };
            let t = match generated {
                Ok(t) => t,
                Err(e) => return usage_error(e),
            };
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let bytes = trace::write_trace(&t, f)?;
            println!(
                "{}: {} {} trace, {} steps, vocab {}, seed {}, {} bytes",
                out.display(),
                kind,
                if full_logit { "full-logit" } else { "signal" },
                steps,
                vocab,
                seed,
                bytes
            );
            Ok(0)
        }
        Command::Analyze {
            max_length,
            report,
            inputs,
        } => {
            let rep = match harness::analyze(&inputs, max_length) {
                Ok(r) => r,
                Err(e @ AnalyzeError::NoInputs) => return usage_error(e),
            };
            for e in &rep.errors {
                eprintln!("{e}");
            }
            for w in &rep.aggregate.warnings {
                eprintln!("warning: {w}");
            }
            emit_json(&rep, report.as_deref())?;
            Ok(rep.exit_code() as u8)
        }
        Command::Extract { config, out, input } => {
            let cfg = match load_config(config.as_deref()) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            let f = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let t = trace::read_trace_with(f, &cfg)?;
            if t.meta.kind == TraceKind::Signal {
                eprintln!("note: {} is already a signal trace", input.display());
            }
            let s = t.to_signals(&cfg)?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let bytes = trace::write_trace(&s, f)?;
            println!(
                "{}: {} steps, {} bytes",
                out.display(),
                s.steps.len(),
                bytes
            );
            Ok(0)
        }
    }
}
