//! Transformer building blocks shared by the language model and the toy
//! vision/audio encoders: pre-norm grouped-query attention plus a SiLU-gated
//! feed-forward, no biases.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Mat;

/// A named parameter slot. All model structs expose their weights through
/// this so checkpoints, freezing and counting share one path.
pub type NamedParam<'a> = (String, &'a Arc<Mat>);
pub type NamedParamMut<'a> = (String, &'a mut Arc<Mat>);

pub trait Parameters {
    fn params(&self) -> Vec<NamedParam<'_>>;
    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
}

impl BlockShape {
    pub fn num_params(&self) -> usize {
        let q = self.heads * self.head_dim;
        let kv = self.kv_heads * self.head_dim;
        2 * self.hidden + self.hidden * q + 2 * self.hidden * kv + q * self.hidden + 3 * self.hidden * self.ffn
    }
}

pub const BLOCK_PARAM_NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Arc<Mat>,
    pub wq: Arc<Mat>,
    pub wk: Arc<Mat>,
    pub wv: Arc<Mat>,
    pub wo: Arc<Mat>,
    pub ffn_norm: Arc<Mat>,
    pub w_gate: Arc<Mat>,
    pub w_up: Arc<Mat>,
    pub w_down: Arc<Mat>,
}

fn lin<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Arc<Mat> {
    Arc::new(Mat::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng))
}

impl BlockWeights {
    pub fn init<R: Rng + ?Sized>(s: &BlockShape, rng: &mut R) -> Self {
        let q = s.heads * s.head_dim;
        let kv = s.kv_heads * s.head_dim;
        BlockWeights {
            attn_norm: Arc::new(Mat::filled(1, s.hidden, 1.0)),
            wq: lin(s.hidden, q, rng),
            wk: lin(s.hidden, kv, rng),
            wv: lin(s.hidden, kv, rng),
            wo: lin(q, s.hidden, rng),
            ffn_norm: Arc::new(Mat::filled(1, s.hidden, 1.0)),
            w_gate: lin(s.hidden, s.ffn, rng),
            w_up: lin(s.hidden, s.ffn, rng),
            w_down: lin(s.ffn, s.hidden, rng),
        }
    }

    pub fn zeros(s: &BlockShape) -> Self {
        let q = s.heads * s.head_dim;
        let kv = s.kv_heads * s.head_dim;
        let z = |r, c| Arc::new(Mat::zeros(r, c));
        BlockWeights {
            attn_norm: z(1, s.hidden),
            wq: z(s.hidden, q),
            wk: z(s.hidden, kv),
            wv: z(s.hidden, kv),
            wo: z(q, s.hidden),
            ffn_norm: z(1, s.hidden),
            w_gate: z(s.hidden, s.ffn),
            w_up: z(s.hidden, s.ffn),
            w_down: z(s.ffn, s.hidden),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<NamedParam<'_>> {
        vec![
            (format!("{prefix}.attn_norm"), &self.attn_norm),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.ffn_norm"), &self.ffn_norm),
            (format!("{prefix}.w_gate"), &self.w_gate),
            (format!("{prefix}.w_up"), &self.w_up),
            (format!("{prefix}.w_down"), &self.w_down),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<NamedParamMut<'_>> {
        vec![
            (format!("{prefix}.attn_norm"), &mut self.attn_norm),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.ffn_norm"), &mut self.ffn_norm),
            (format!("{prefix}.w_gate"), &mut self.w_gate),
            (format!("{prefix}.w_up"), &mut self.w_up),
            (format!("{prefix}.w_down"), &mut self.w_down),
        ]
    }

    pub fn expected_shapes(s: &BlockShape) -> [(usize, usize); 9] {
        let q = s.heads * s.head_dim;
        let kv = s.kv_heads * s.head_dim;
        [
            (1, s.hidden),
            (s.hidden, q),
            (s.hidden, kv),
            (s.hidden, kv),
            (q, s.hidden),
            (1, s.hidden),
            (s.hidden, s.ffn),
            (s.hidden, s.ffn),
            (s.ffn, s.hidden),
        ]
    }
}

/// Graph handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Registers a parameter as trainable or constant.
pub fn leaf(g: &mut Graph, m: &Arc<Mat>, trainable: bool) -> Var {
    if trainable {
        g.param(m)
    } else {
        g.constant(Arc::clone(m))
    }
}

impl BlockVars {
    pub fn register(g: &mut Graph, w: &BlockWeights, trainable: bool) -> Self {
        BlockVars {
            attn_norm: leaf(g, &w.attn_norm, trainable),
            wq: leaf(g, &w.wq, trainable),
            wk: leaf(g, &w.wk, trainable),
            wv: leaf(g, &w.wv, trainable),
            wo: leaf(g, &w.wo, trainable),
            ffn_norm: leaf(g, &w.ffn_norm, trainable),
            w_gate: leaf(g, &w.w_gate, trainable),
            w_up: leaf(g, &w.w_up, trainable),
            w_down: leaf(g, &w.w_down, trainable),
        }
    }

    /// Handles in the same order as [`BlockWeights::named`].
    pub fn handles(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

#[derive(Debug, Clone)]
pub enum AttnMode {
    Causal,
    Bidirectional,
    /// Row-major `len x (cached + len)` allow-list.
    Explicit(Arc<Vec<bool>>),
}

/// One independent sequence inside the stacked rows of a forward pass.
#[derive(Debug, Clone)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub positions: Arc<Vec<usize>>,
    pub mode: AttnMode,
}

impl Span {
    pub fn causal(start: usize, positions: Vec<usize>) -> Self {
        Span {
            start,
            len: positions.len(),
            positions: Arc::new(positions),
            mode: AttnMode::Causal,
        }
    }

    pub fn bidirectional(start: usize, len: usize) -> Self {
        Span {
            start,
            len,
            positions: Arc::new((0..len).collect()),
            mode: AttnMode::Bidirectional,
        }
    }
}

/// Post-rotation keys and values already seen by each layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    layers: Vec<Option<(Arc<Mat>, Arc<Mat>)>>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            layers: vec![None; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.as_ref())
            .map_or(0, |(k, _)| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn causal_mask(len: usize, cached: usize) -> Vec<bool> {
    let total = cached + len;
    let mut m = vec![false; len * total];
    for i in 0..len {
        for j in 0..=cached + i {
            m[i * total + j] = true;
        }
    }
    m
}

pub struct BlockContext<'a> {
    pub shape: &'a BlockShape,
    pub eps: f64,
    pub rope_base: Option<f64>,
}

/// One pre-norm block over all spans. With `caches`, each span's keys and
/// values are appended to its cache at `layer`.
pub fn block_forward(
    g: &mut Graph,
    vars: &BlockVars,
    ctx: &BlockContext<'_>,
    x: Var,
    spans: &[Span],
    mut caches: Option<(&mut [KvCache], usize)>,
) -> Var {
    let s = ctx.shape;
    let hd = s.head_dim;
    let group = s.heads / s.kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let h = g.rms_norm(x, vars.attn_norm, ctx.eps);
    let q = g.matmul(h, vars.wq);
    let k = g.matmul(h, vars.wk);
    let v = g.matmul(h, vars.wv);

    let mut outs = Vec::with_capacity(spans.len());
    for (si, span) in spans.iter().enumerate() {
        let mut qs = g.slice_rows(q, span.start, span.len);
        let mut ks = g.slice_rows(k, span.start, span.len);
        let mut vs = g.slice_rows(v, span.start, span.len);
        if let Some(base) = ctx.rope_base {
            qs = g.rope(qs, Arc::clone(&span.positions), hd, base);
            ks = g.rope(ks, Arc::clone(&span.positions), hd, base);
        }
        let mut cached = 0;
        if let Some((caches, layer)) = caches.as_mut() {
            let slot = &mut caches[si].layers[*layer];
            if let Some((ck, cv)) = slot.as_ref() {
                cached = ck.rows();
                let ckv = g.constant(Arc::clone(ck));
                let cvv = g.constant(Arc::clone(cv));
                ks = g.concat_rows(&[ckv, ks]);
                vs = g.concat_rows(&[cvv, vs]);
            }
            *slot = Some((g.shared_value(ks), g.shared_value(vs)));
        }
        let mask = match &span.mode {
            AttnMode::Causal => Some(Arc::new(causal_mask(span.len, cached))),
            AttnMode::Bidirectional => None,
            AttnMode::Explicit(m) => {
                assert_eq!(m.len(), span.len * (cached + span.len), "explicit mask size");
                Some(Arc::clone(m))
            }
        };
        let mut heads = Vec::with_capacity(s.heads);
        for head in 0..s.heads {
            let kvh = head / group;
            let qh = g.slice_cols(qs, head * hd, hd);
            let kh = g.slice_cols(ks, kvh * hd, hd);
            let vh = g.slice_cols(vs, kvh * hd, hd);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, mask.clone());
            heads.push(g.matmul(p, vh));
        }
        outs.push(g.concat_cols(&heads));
    }
    let o = g.concat_rows(&outs);
    let attn = g.matmul(o, vars.wo);
    let x1 = g.add(x, attn);

    let h2 = g.rms_norm(x1, vars.ffn_norm, ctx.eps);
    let gate = g.matmul(h2, vars.w_gate);
    let gate = g.silu(gate);
    let up = g.matmul(h2, vars.w_up);
    let act = g.mul(gate, up);
    let down = g.matmul(act, vars.w_down);
    g.add(x1, down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rms_norm_output_has_gain_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for gain in [0.5, 1.0, 2.5] {
            let mut g = Graph::new();
            let x = g.input(Mat::randn(16, 64, 3.0, &mut rng));
            let s = g.input(Mat::filled(1, 64, gain));
            let y = g.rms_norm(x, s, 1e-6);
            let yv = g.value(y);
            for r in 0..16 {
                let rms = (yv.row(r).iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
                assert!((rms - gain).abs() < 1e-4, "rms {rms} vs gain {gain}");
            }
        }
    }

    #[test]
    fn block_param_count_matches_allocation() {
        let shape = BlockShape {
            hidden: 12,
            heads: 4,
            kv_heads: 2,
            head_dim: 3,
            ffn: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = BlockWeights::init(&shape, &mut rng);
        let allocated: usize = w.named("b").iter().map(|(_, m)| m.len()).sum();
        assert_eq!(allocated, shape.num_params());
        for ((_, m), want) in w.named("b").iter().zip(BlockWeights::expected_shapes(&shape)) {
            assert_eq!(m.shape(), want);
        }
    }

    #[test]
    fn causal_mask_with_cache_offset() {
        let m = causal_mask(2, 3);
        assert_eq!(m, vec![true, true, true, true, false, true, true, true, true, true]);
    }
}
