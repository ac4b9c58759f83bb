#![allow(dead_code)]

use leash::signals::validate;
use leash::synth::{synthesize, Regime, SynthSpec};
use leash::trace::Steps;
use leash::{StepSignals, StopConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stopper configs used for equivalence sweeps, degenerate corners included.
pub fn sweep_configs() -> Vec<(&'static str, StopConfig)> {
    let d = StopConfig::default();
    vec![
        ("default", d.clone()),
        ("vanilla", d.clone().vanilla()),
        (
            "k1-L1-gamma0",
            StopConfig {
                window: 1,
                vote_span: 1,
                entropy_drop: 0.0,
                min_length: 0,
                warmup: 0,
                ..d.clone()
            },
        ),
        (
            "short",
            StopConfig {
                window: 4,
                vote_span: 3,
                entropy_slack: 0.01,
                margin_slack: 0.1,
                min_length: 16,
                warmup: 4,
                max_length: 128,
                saturation_threshold: 0.9,
                ..d.clone()
            },
        ),
        (
            "long-window",
            StopConfig {
                window: 12,
                vote_span: 7,
                entropy_drop: 0.3,
                min_length: 32,
                warmup: 0,
                max_length: 200,
                saturation_threshold: 0.95,
                ..d.clone()
            },
        ),
        (
            "even-span",
            StopConfig {
                window: 3,
                vote_span: 2,
                entropy_drop: 0.05,
                min_length: 8,
                warmup: 2,
                ..d.clone()
            },
        ),
    ]
}

/// Randomized regime parameters drawn from `seed`.
pub fn random_spec(kind: Regime, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let vocab = [50, 1000, 32000][rng.random_range(0..3)];
    let steps = if rng.random_bool(0.8) {
        320
    } else {
        rng.random_range(20..400)
    };
    let mut spec = SynthSpec::new(kind, steps, vocab, seed);
    let h0 = rng.random_range(0.5..5.0f64);
    spec.initial_entropy = Some(h0);
    spec.final_entropy = Some(h0 * rng.random_range(0.1..0.9));
    spec.decay_rate = rng.random_range(0.005..0.1);
    spec.final_margin = rng.random_range(0.5..5.0);
    spec.noise_scale = match kind {
        Regime::Noisy => rng.random_range(0.002..0.05),
        _ if rng.random_bool(0.3) => rng.random_range(0.0..0.02),
        _ => 0.0,
    };
    spec.saturation_period = rng.random_range(6..20);
    spec.saturation_run = rng.random_range(1..=spec.saturation_period / 2);
    spec
}

pub fn signal_steps(spec: &SynthSpec) -> Vec<StepSignals> {
    match synthesize(spec).unwrap().steps {
        Steps::Signals(s) => s,
        Steps::Logits(_) => unreachable!(),
    }
}

/// Recompute saturation flags for `cfg`, as a trace reader would.
pub fn for_config(steps: &[StepSignals], vocab: usize, cfg: &StopConfig) -> Vec<StepSignals> {
    steps
        .iter()
        .map(|s| validate(s.clone(), vocab, cfg).unwrap())
        .collect()
}
