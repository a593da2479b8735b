use std::sync::Arc;

use omni_core::model::OmniModel;
use omni_core::sequencer::{AudioRef, ImageRef, Segment};
use omni_core::train::*;
use omni_core::vision::Image;
use omni_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mixed_batch(m: &OmniModel, seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<f32> = (0..40 * 24 * 3).map(|_| rng.random::<f32>()).collect();
    let wave: Vec<f32> = (0..3200).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let segs = vec![
        Segment::Text(m.tokenizer.encode("look: ")),
        Segment::Image(ImageRef::Pixels(Arc::new(Image::new(40, 24, pixels).unwrap()))),
        Segment::Text(m.tokenizer.encode(" and listen ")),
        Segment::Audio(AudioRef::Wave {
            samples: Arc::new(wave),
            sample_rate: 16000,
        }),
        Segment::Text(m.tokenizer.encode(" done")),
    ];
    let a = prepare_sample(m, &segs).unwrap();
    let b = TrainSample::text(m.tokenizer.encode("plain text doc"));
    TrainBatch::pack(vec![a, b], 4096, seed).unwrap()
}

fn snapshot(m: &OmniModel) -> Vec<(String, ModuleTag, Vec<u64>)> {
    m.tagged_params()
        .into_iter()
        .map(|(n, t, w)| (n, t, w.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn bundle_gradients_match_finite_differences() {
    let m = OmniModel::tiny(3);
    let batch = mixed_batch(&m, 1);
    let plan = find_stage("omni-tune").unwrap();
    let r = check_gradients(&m, &batch, &plan, 60, 1e-5, 1e-3, 9).unwrap();
    assert!(r.pass_fraction() >= 0.95, "{r:?}");
}

#[test]
fn frozen_tensors_stay_bitwise_identical() {
    let mut m = OmniModel::tiny(4);
    let batch = mixed_batch(&m, 2);
    let plan = find_stage("vision-align-1").unwrap();
    let before = snapshot(&m);
    let r = train_toy(&mut m, &batch, &plan, 100).unwrap();
    assert_eq!(r.losses.len(), 100);
    let after = snapshot(&m);
    let mut changed = 0;
    for ((name, tag, a), (_, _, b)) in before.iter().zip(&after) {
        if *tag == ModuleTag::VisionConnector {
            changed += usize::from(a != b);
        } else {
            assert_eq!(a, b, "{name} moved while frozen");
        }
    }
    assert!(changed > 0);
    assert!(r.losses[99] < r.losses[0]);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let mut m = OmniModel::tiny(5);
    let batch = mixed_batch(&m, 3);
    let plan = StagePlan::new("frozen-lr", ModuleTag::ALL, LrSchedule::constant(0.0), 4096).unwrap();
    let before = m.clone();
    let r = train_toy(&mut m, &batch, &plan, 5).unwrap();
    assert_eq!(m, before);
    assert!(r.losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn four_sample_text_fixture_overfits() {
    let texts = ["the quick brown fox", "jumps over the lazy dog", "hello omni world", "packing keeps docs apart"];
    let mut m = OmniModel::tiny(1);
    let samples = texts.iter().map(|t| TrainSample::text(m.tokenizer.encode(t))).collect();
    let batch = TrainBatch::pack(samples, 4096, 0).unwrap();
    let plan = StagePlan::new("overfit", [ModuleTag::Lm], LrSchedule::constant(0.3), 4096).unwrap();
    let r = train_toy(&mut m, &batch, &plan, 500).unwrap();
    assert!(r.losses.iter().any(|l| *l < 0.1 * r.losses[0]));
}

#[test]
fn divergence_reports_the_step() {
    let mut m = OmniModel::tiny(6);
    let batch = TrainBatch::pack(vec![TrainSample::text(m.tokenizer.encode("boom boom"))], 4096, 0).unwrap();
    let plan = StagePlan::new("explode", [ModuleTag::Lm], LrSchedule::constant(1e300), 4096).unwrap();
    match train_toy(&mut m, &batch, &plan, 20) {
        Err(Error::Diverged { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn oversized_bundle_is_rejected() {
    let mut m = OmniModel::toy(0);
    let batch = TrainBatch::pack(vec![TrainSample::text(vec![1, 2, 3])], 4096, 0).unwrap();
    assert!(train_toy(&mut m, &batch, &find_stage("sft-4k").unwrap(), 1).is_err());
}
