mod common;

use std::time::Duration;

use omni_core::audio::{self, AudioClip, HOP, LOG_FLOOR, SAMPLE_RATE};
use omni_core::bench::{speed_bench, BenchOptions, FakeClock};
use omni_core::lm::{self, count_params, LmConfig, LmInput, LmWeights};
use omni_core::train::{LrKind, LrSchedule, ModuleTag, StagePlan};
use omni_core::websearch::{run_pipeline, DecisionMode, MockSearchClient, ScriptedBackend, StateKind};
use proptest::prelude::*;

fn lm_config() -> impl Strategy<Value = LmConfig> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..3, 1usize..40, 1usize..200).prop_map(
        |(kv, group, half_hd, layers, ffn, vocab)| {
            let heads = kv * group;
            LmConfig {
                hidden: heads * 2 * half_hd,
                layers,
                heads,
                kv_heads: kv,
                ffn,
                vocab,
                ..LmConfig::toy(vocab)
            }
        },
    )
}

const REPLY_POOL: &[&str] = &[
    r#"{"action":"search","query":"What is the capital of France"}"#,
    r#"{"action":"search","query":"how does a bpe tokenizer work"}"#,
    r#"{"action":"search","query":"what happened on an unrecorded day"}"#,
    r#"{"action":"search","query":""}"#,
    r#"{"action":"answer"}"#,
    "not json",
    "",
    "Paris is the capital.",
    "A short extract.",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lm_config_accounting(cfg in lm_config(), seed in 0u64..1000) {
        prop_assert!(cfg.validate().is_ok());
        let report = count_params(&cfg);
        prop_assert_eq!(report.total, report.embedding + report.head + report.backbone);
        let w = LmWeights::init(&cfg, seed);
        prop_assert_eq!(common::allocated_params(&w), report.total);
        let logits = lm::forward(&cfg, &w, LmInput::Ids(&[0, (cfg.vocab - 1) as u32]), None).unwrap();
        prop_assert_eq!(logits.shape(), (2, cfg.vocab));
        prop_assert!(logits.is_finite());
    }

    #[test]
    fn lm_config_rejects_bad_grouping(kv in 2usize..5, heads in 1usize..12, hd in 1usize..5) {
        prop_assume!(heads % kv != 0);
        let cfg = LmConfig { hidden: heads * 2 * hd, heads, kv_heads: kv, ..LmConfig::toy(32) };
        prop_assert!(cfg.validate().is_err());
        let cfg = LmConfig { max_context: 0, ..LmConfig::toy(32) };
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn audio_frames_and_tokens(len in 0usize..48_000, seed in any::<u64>()) {
        let samples: Vec<f32> = (0..len).map(|i| ((i as u64 ^ seed) % 2001) as f32 / 1000.0 - 1.0).collect();
        let clip = AudioClip { samples, sample_rate: SAMPLE_RATE };
        let mel = audio::mel_spectrogram(&clip).unwrap();
        prop_assert_eq!(mel.rows(), len / HOP);
        prop_assert_eq!(audio::clip_tokens(len), len / HOP / 2);
        let floor = (LOG_FLOOR.log10() + 4.0) / 4.0;
        prop_assert!(mel.data().iter().all(|v| v.is_finite() && *v >= floor));
    }

    #[test]
    fn clips_cover_the_waveform(len in 0usize..2_000_000) {
        let clips = audio::segment_clips(&vec![0.0; len], SAMPLE_RATE).unwrap();
        prop_assert!(clips.iter().all(|c| c.duration_s() <= 30.0));
        prop_assert_eq!(clips.iter().map(|c| c.samples.len()).sum::<usize>(), len);
    }

    #[test]
    fn schedules_stay_in_range(
        lrs in prop::array::uniform3(1e-6f64..1e-3),
        warm in 0.0f64..1.0,
        decay in 0.0f64..1.0,
        total in 1usize..500,
        step_frac in 0.0f64..=1.0,
    ) {
        let s = LrSchedule {
            kind: LrKind::WarmupConstantCosine,
            lr_init: lrs[0],
            lr_peak: lrs[1],
            lr_final: lrs[2],
            warmup_frac: warm,
            decay_frac: decay,
        };
        prop_assert_eq!(s.validate().is_ok(), warm + decay <= 1.0);
        if warm + decay <= 1.0 {
            let lr = s.lr_at((step_frac * total as f64) as usize, total).unwrap();
            let lo = lrs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = lrs.iter().copied().fold(0.0, f64::max);
            prop_assert!(lr >= lo * (1.0 - 1e-12) && lr <= hi * (1.0 + 1e-12), "{lr} outside [{lo}, {hi}]");
        }
        prop_assert!(s.lr_at(total + 1, total).is_err());
    }

    #[test]
    fn stage_plans_need_modules_and_known_context(ctx in 1usize..70_000) {
        let ok = StagePlan::new("s", [ModuleTag::Lm], LrSchedule::constant(1e-4), ctx).is_ok();
        prop_assert_eq!(ok, ctx == 4096 || ctx == 32768);
        prop_assert!(StagePlan::new("s", [], LrSchedule::constant(1e-4), 4096).is_err());
    }

    #[test]
    fn pipeline_transcripts_are_legal(
        picks in prop::collection::vec(0usize..REPLY_POOL.len(), 0..12),
        q in 0usize..3,
        k in 1usize..4,
    ) {
        let queries = ["What is the capital of France?", "How does a BPE tokenizer work?", "Tell me a joke"];
        let replies = picks.iter().map(|&i| REPLY_POOL[i].to_string())
            .chain(std::iter::repeat_n("filler reply".to_string(), 32));
        let mut backend = ScriptedBackend::new(replies);
        let (answer, t) = run_pipeline(queries[q], &mut backend, &MockSearchClient::new(), k).unwrap();
        prop_assert!(t.is_legal(), "{:?}", t.kinds());
        prop_assert_eq!(t.kinds().last().copied(), Some(StateKind::Answer));
        prop_assert_eq!(&answer, &t.answer);
        let searched = t.kinds().contains(&StateKind::Search);
        prop_assert_eq!(searched, t.decision.mode == DecisionMode::Search);
        if t.decision.mode == DecisionMode::Search {
            prop_assert!(t.decision.query_rewrite.as_deref().is_some_and(|s| !s.trim().is_empty()));
        }
        for s in &t.sources {
            prop_assert!(s.snippet.is_empty() || !s.summary.is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bench_throughput_identity(
        prefill_ms in 1u64..5000,
        decode_ms in 1u64..5000,
        batch in 1usize..4,
        out in 2usize..6,
    ) {
        let cfg = LmConfig { hidden: 8, layers: 1, heads: 2, kv_heads: 1, ffn: 8, ..LmConfig::toy(16) };
        let w = LmWeights::init(&cfg, 0);
        let opts = BenchOptions { input_tokens: 3, output_tokens: out, batch, warmup: 0, iters: 3, seed: 0 };
        let clock = FakeClock::phases(Duration::from_millis(prefill_ms), Duration::from_millis(decode_ms));
        let r = speed_bench(&cfg, &w, &opts, &clock).unwrap();
        prop_assert!(r.prefill_s > 0.0 && r.decode_s > 0.0);
        prop_assert_eq!(r.decode_s, Duration::from_millis(decode_ms).as_secs_f64());
        prop_assert_eq!(r.decode_tokens_per_sec, Some((batch * out) as f64 / r.decode_s));
    }
}
