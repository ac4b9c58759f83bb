use leash::harness::replay_source;
use leash::synth::{synthesize, synthesize_logits, Regime, SynthSpec};
use leash::trace::{read_trace, write_trace, Steps, Trace, TraceKind, TraceMeta};
use leash::{StepSignals, StopConfig};
use proptest::prelude::*;

fn logit_trace_strategy() -> impl Strategy<Value = Trace> {
    (2usize..40, 0usize..12).prop_flat_map(|(vocab, steps)| {
        prop::collection::vec(
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), vocab),
            steps,
        )
        .prop_map(move |rows| Trace {
            meta: TraceMeta::new(TraceKind::FullLogit, vocab),
            steps: Steps::Logits(rows),
        })
    })
}

fn signal_trace_strategy() -> impl Strategy<Value = Trace> {
    prop::collection::vec(
        (
            0.0f64..3.0,
            0.0f64..1e3,
            1e-9f64..=1.0,
            prop::option::of(any::<u32>()),
            prop::option::of(0.0f64..10.0),
        ),
        0..40,
    )
    .prop_map(|recs| {
        let steps = recs
            .into_iter()
            .enumerate()
            .map(|(i, (h, m, p, tok, dt))| StepSignals {
                step: i + 1,
                entropy: h,
                margin: m,
                p_max: p,
                saturated: p >= 0.99,
                token_id: tok,
                dt,
            })
            .collect();
        let mut meta = TraceMeta::new(TraceKind::Signal, 50);
        meta.model_id = "m".into();
        meta.prompt_id = "p-ü".into();
        Trace {
            meta,
            steps: Steps::Signals(steps),
        }
    })
}

fn bits(t: &Trace) -> Vec<Vec<u32>> {
    match &t.steps {
        Steps::Logits(rows) => rows
            .iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect(),
        Steps::Signals(_) => unreachable!(),
    }
}

proptest! {
    #[test]
    fn logit_roundtrip_is_bit_exact(t in logit_trace_strategy()) {
        let mut buf = Vec::new();
        let n = write_trace(&t, &mut buf).unwrap();
        prop_assert_eq!(n as usize, buf.len());
        let back = read_trace(&buf[..]).unwrap();
        prop_assert_eq!(bits(&back), bits(&t));
        prop_assert_eq!(&back.meta, &t.meta);
    }

    #[test]
    fn signal_roundtrip_is_exact(t in signal_trace_strategy()) {
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        let back = read_trace(&buf[..]).unwrap();
        prop_assert_eq!(back, t);
    }
}

fn to_bytes(t: &Trace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(t, &mut buf).unwrap();
    buf
}

#[test]
fn full_logit_and_signal_replays_agree() {
    let configs = [
        StopConfig::default(),
        StopConfig {
            window: 4,
            vote_span: 3,
            min_length: 16,
            warmup: 0,
            max_length: 128,
            saturation_threshold: 0.9,
            clip_band: 5.0,
            ..StopConfig::default()
        },
    ];
    for cfg in &configs {
        for kind in Regime::ALL {
            for seed in 0..6 {
                let mut spec = SynthSpec::new(kind, 320, 48, seed);
                spec.dt_seconds = Some(0.01);
                let full = synthesize_logits(&spec).unwrap();
                let signals = full.to_signals(cfg).unwrap();
                let a = replay_source(&to_bytes(&full)[..], cfg).unwrap();
                let b = replay_source(&to_bytes(&signals)[..], cfg).unwrap();
                assert_eq!(a, b, "{kind} seed {seed}");
            }
        }
    }
}

#[test]
fn signal_trace_size_and_line_count() {
    let spec = SynthSpec::new(Regime::Converging, 320, 32000, 7);
    let bytes = to_bytes(&synthesize(&spec).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 321);
    // a 320-step signal trace stays in the tens of kilobytes
    assert!(text.len() < 64 * 1024, "{} bytes", text.len());
}
