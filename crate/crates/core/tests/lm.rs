mod common;

use std::sync::Arc;

use omni_core::autograd::Graph;
use omni_core::lm::{self, LmConfig, LmInput, LmWeights, DEFAULT_ROPE_BASE};
use omni_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(heads: usize, kv_heads: usize) -> LmConfig {
    LmConfig {
        hidden: 24,
        layers: 2,
        heads,
        kv_heads,
        ffn: 40,
        vocab: 50,
        rope_base: DEFAULT_ROPE_BASE,
        max_context: 64,
        norm_eps: 1e-5,
    }
}

fn ids(seed: u64, n: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..50)).collect()
}

#[test]
fn forward_matches_loop_oracle_for_mha_and_gqa() {
    for (heads, kv) in [(4, 4), (4, 2), (4, 1)] {
        let cfg = config(heads, kv);
        let w = LmWeights::init(&cfg, heads as u64 * 10 + kv as u64);
        let x = ids(3, 12);
        let positions: Vec<usize> = (0..12).collect();
        let got = lm::forward(&cfg, &w, LmInput::Ids(&x), None).unwrap();
        let want = common::lm_oracle(&cfg, &w, &x, &positions);
        assert!(got.max_abs_diff(&want) < 1e-9, "heads {heads} kv {kv}");
    }
}

#[test]
fn rope_op_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Mat::randn(5, 16, 1.0, &mut rng);
    let positions = vec![0, 1, 7, 300, 4095];
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let r = g.rope(v, Arc::new(positions.clone()), 8, DEFAULT_ROPE_BASE);
    for (i, &p) in positions.iter().enumerate() {
        let want = common::rope_oracle(x.row(i), p, 8, DEFAULT_ROPE_BASE);
        for (a, b) in g.value(r).row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_decode_matches_single_sequence_decode() {
    let cfg = config(4, 2);
    let w = LmWeights::init(&cfg, 1);
    let prompts = [ids(1, 5), ids(2, 9), ids(3, 3)];
    let inputs: Vec<LmInput<'_>> = prompts.iter().map(|p| LmInput::Ids(p)).collect();
    let mut session = lm::DecodeSession::prefill(&cfg, &w, &inputs).unwrap();
    let mut batched = vec![Vec::new(); 3];
    for step in 0..6 {
        let next = session.greedy_next();
        for (b, t) in batched.iter_mut().zip(&next) {
            b.push(*t);
        }
        if step < 5 {
            session.step(&next).unwrap();
        }
    }
    for (p, b) in prompts.iter().zip(&batched) {
        let single = lm::generate(&cfg, &w, LmInput::Ids(p), 6, None).unwrap();
        assert_eq!(&single, b);
    }
}
