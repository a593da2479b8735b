use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use omni_core::audio::{self, AudioClip, SAMPLE_RATE};
use omni_core::autograd::Graph;
use omni_core::corpus::MinHasher;
use omni_core::lm::{self, DecodeSession, LmInput, DEFAULT_ROPE_BASE};
use omni_core::model::OmniModel;
use omni_core::tensor::{matmul, Mat};
use omni_core::tokenizer::{default_specials, TokenizerModel};
use omni_core::vision::plan_slices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Mat::randn(128, 128, 1.0, &mut rng);
    let b = Mat::randn(128, 384, 1.0, &mut rng);
    c.bench_function("matmul_128x128x384", |bch| bch.iter(|| matmul(black_box(&a), black_box(&b))));

    let x = Mat::randn(256, 64, 1.0, &mut rng);
    let positions = Arc::new((0..256).collect::<Vec<usize>>());
    c.bench_function("rope_256x64", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            g.rope(v, positions.clone(), 64, DEFAULT_ROPE_BASE)
        })
    });
}

fn text_kernels(c: &mut Criterion) {
    let text = "The quick brown fox jumps over the lazy dog. ".repeat(50);
    let tok = TokenizerModel::byte_level(default_specials());
    c.bench_function("encode_byte_level_2k", |bch| bch.iter(|| tok.encode(black_box(&text))));

    let hasher = MinHasher::new(128, 5, 0).unwrap();
    c.bench_function("minhash_128_signature", |bch| bch.iter(|| hasher.signature(black_box(&text))));
}

fn media_kernels(c: &mut Criterion) {
    let clip = AudioClip {
        samples: (0..SAMPLE_RATE as usize).map(|i| (i as f32 * 0.05).sin()).collect(),
        sample_rate: SAMPLE_RATE,
    };
    c.bench_function("mel_energies_1s", |bch| bch.iter(|| audio::mel_energies(black_box(&clip)).unwrap()));
    c.bench_function("plan_slices_4000x500", |bch| bch.iter(|| plan_slices(black_box(4000), 500, 9, 448).unwrap()));
}

fn lm_kernels(c: &mut Criterion) {
    let model = OmniModel::toy(0);
    let (cfg, w) = (&model.config.lm, &model.lm);
    let ids: Vec<u32> = (0..64).map(|i| (i * 7 % 200) as u32).collect();
    c.bench_function("lm_forward_64", |bch| bch.iter(|| lm::forward(cfg, w, LmInput::Ids(black_box(&ids)), None).unwrap()));
    c.bench_function("decode_step_batch8", |bch| {
        let prompts: Vec<LmInput> = (0..8).map(|_| LmInput::Ids(&ids)).collect();
        bch.iter_batched(
            || DecodeSession::prefill(cfg, w, &prompts).unwrap(),
            |mut s| {
                let next = s.greedy_next();
                s.step(&next).unwrap();
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tensor_kernels, text_kernels, media_kernels, lm_kernels
}
criterion_main!(benches);
