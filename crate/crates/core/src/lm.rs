//! Decoder-only language model: RMS pre-norm, grouped-query attention with
//! rotary positions, SiLU-gated feed-forward, untied embedding and output
//! head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    block_forward, leaf, AttnMode, BLOCK_PARAM_NAMES, BlockContext, BlockShape, BlockVars, BlockWeights, KvCache,
    NamedParam, NamedParamMut, Parameters, Span,
};
use crate::tensor::Mat;

pub const DEFAULT_ROPE_BASE: f64 = 5_000_000.0;
pub const DEFAULT_MAX_CONTEXT: usize = 4096;
pub const EXTENDED_MAX_CONTEXT: usize = 32768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_max_context() -> usize {
    DEFAULT_MAX_CONTEXT
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl LmConfig {
    /// Desk-scale defaults: hidden 128, 4 layers, 8 query heads sharing 2
    /// key/value heads.
    pub fn toy(vocab: usize) -> Self {
        LmConfig {
            hidden: 128,
            layers: 4,
            heads: 8,
            kv_heads: 2,
            ffn: 384,
            vocab,
            rope_base: DEFAULT_ROPE_BASE,
            max_context: DEFAULT_MAX_CONTEXT,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            hidden: self.hidden,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim(),
            ffn: self.ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must be a multiple of kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden ({}) must equal heads ({}) x head_dim",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!("head_dim {} must be even for rotary embedding", self.head_dim())));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::config("rope_base must be a positive real"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Parameter counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub embedding: usize,
    pub head: usize,
    pub backbone: usize,
    pub total: usize,
}

impl ParamReport {
    /// Billions, rounded to two decimals.
    pub fn billions(n: usize) -> String {
        format!("{:.2}B", n as f64 / 1e9)
    }
}

/// Closed-form parameter count from the configuration alone.
pub fn count_params(cfg: &LmConfig) -> ParamReport {
    let embedding = cfg.vocab * cfg.hidden;
    let head = cfg.hidden * cfg.vocab;
    let backbone = cfg.layers * cfg.block_shape().num_params() + cfg.hidden;
    ParamReport {
        embedding,
        head,
        backbone,
        total: embedding + head + backbone,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmWeights {
    pub embed: Arc<Mat>,
    pub layers: Vec<BlockWeights>,
    pub final_norm: Arc<Mat>,
    pub head: Arc<Mat>,
}

impl LmWeights {
    pub fn init(cfg: &LmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.block_shape();
        LmWeights {
            embed: Arc::new(Mat::randn(cfg.vocab, cfg.hidden, 1.0, &mut rng)),
            layers: (0..cfg.layers).map(|_| BlockWeights::init(&shape, &mut rng)).collect(),
            final_norm: Arc::new(Mat::filled(1, cfg.hidden, 1.0)),
            head: Arc::new(Mat::randn(cfg.hidden, cfg.vocab, 1.0 / (cfg.hidden as f64).sqrt(), &mut rng)),
        }
    }

    pub fn zeros(cfg: &LmConfig) -> Self {
        let shape = cfg.block_shape();
        LmWeights {
            embed: Arc::new(Mat::zeros(cfg.vocab, cfg.hidden)),
            layers: (0..cfg.layers).map(|_| BlockWeights::zeros(&shape)).collect(),
            final_norm: Arc::new(Mat::zeros(1, cfg.hidden)),
            head: Arc::new(Mat::zeros(cfg.hidden, cfg.vocab)),
        }
    }

    pub fn expected_shapes(cfg: &LmConfig) -> Vec<(String, (usize, usize))> {
        let shape = cfg.block_shape();
        let mut out = vec![("embed".to_string(), (cfg.vocab, cfg.hidden))];
        for l in 0..cfg.layers {
            for (name, s) in BLOCK_PARAM_NAMES.iter().zip(BlockWeights::expected_shapes(&shape)) {
                out.push((format!("layers.{l}.{name}"), s));
            }
        }
        out.push(("final_norm".into(), (1, cfg.hidden)));
        out.push(("head".into(), (cfg.hidden, cfg.vocab)));
        out
    }

    /// Checks every tensor against the configuration and for finiteness.
    pub fn validate(&self, cfg: &LmConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let actual = self.params();
        if expected.len() != actual.len() {
            return Err(Error::config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, want), (_, m)) in expected.iter().zip(actual) {
            if m.shape() != *want {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: vec![want.0, want.1],
                    found: vec![m.rows(), m.cols()],
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(())
    }
}

impl Parameters for LmWeights {
    fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("layers.{i}")));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("layers.{i}")));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }
}

/// Graph handles for all language-model weights.
pub struct LmVars {
    pub embed: Var,
    pub layers: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl LmVars {
    pub fn register(g: &mut Graph, w: &LmWeights, trainable: bool) -> Self {
        LmVars {
            embed: leaf(g, &w.embed, trainable),
            layers: w.layers.iter().map(|l| BlockVars::register(g, l, trainable)).collect(),
            final_norm: leaf(g, &w.final_norm, trainable),
            head: leaf(g, &w.head, trainable),
        }
    }

    /// Handles in the same order as [`LmWeights::params`].
    pub fn handles(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend(l.handles());
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

pub enum LmInput<'a> {
    Ids(&'a [u32]),
    Embeddings(&'a Mat),
}

impl LmInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            LmInput::Ids(ids) => ids.len(),
            LmInput::Embeddings(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn check_ids(cfg: &LmConfig, ids: &[u32]) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= cfg.vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab: cfg.vocab }),
        None => Ok(()),
    }
}

/// Token-embedding lookup on the graph.
pub fn embed_ids(g: &mut Graph, vars: &LmVars, ids: &[u32]) -> Var {
    g.gather(vars.embed, Arc::new(ids.iter().map(|&i| i as usize).collect()))
}

/// Places an input sequence on the graph, validating it.
pub fn input_var(g: &mut Graph, cfg: &LmConfig, vars: &LmVars, input: &LmInput<'_>) -> Result<Var> {
    match input {
        LmInput::Ids(ids) => {
            check_ids(cfg, ids)?;
            Ok(embed_ids(g, vars, ids))
        }
        LmInput::Embeddings(m) => {
            if m.cols() != cfg.hidden {
                return Err(Error::Shape {
                    name: "input embeddings".into(),
                    expected: vec![m.rows(), cfg.hidden],
                    found: vec![m.rows(), m.cols()],
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("input embeddings".into()));
            }
            Ok(g.input((*m).clone()))
        }
    }
}

/// Runs the decoder stack over stacked rows `x` partitioned into `spans`.
pub fn lm_graph(
    g: &mut Graph,
    cfg: &LmConfig,
    vars: &LmVars,
    x: Var,
    spans: &[Span],
    mut caches: Option<&mut [KvCache]>,
) -> Var {
    let shape = cfg.block_shape();
    let ctx = BlockContext {
        shape: &shape,
        eps: cfg.norm_eps,
        rope_base: Some(cfg.rope_base),
    };
    let mut h = x;
    for (layer, bv) in vars.layers.iter().enumerate() {
        let c = caches.as_deref_mut().map(|c| (c, layer));
        h = block_forward(g, bv, &ctx, h, spans, c);
    }
    let h = g.rms_norm(h, vars.final_norm, cfg.norm_eps);
    g.matmul(h, vars.head)
}

fn check_positions(len: usize, positions: Option<&[usize]>) -> Result<Vec<usize>> {
    match positions {
        Some(p) if p.len() != len => Err(Error::input(format!(
            "{} position ids for {len} tokens",
            p.len()
        ))),
        Some(p) => Ok(p.to_vec()),
        None => Ok((0..len).collect()),
    }
}

/// Causal forward pass; returns `seq x vocab` logits.
pub fn forward(cfg: &LmConfig, w: &LmWeights, input: LmInput<'_>, positions: Option<&[usize]>) -> Result<Mat> {
    forward_with_mode(cfg, w, input, positions, AttnMode::Causal)
}

/// Forward pass with an explicit `seq x seq` attention allow-list, as used
/// for packed rows.
pub fn forward_masked(
    cfg: &LmConfig,
    w: &LmWeights,
    input: LmInput<'_>,
    positions: &[usize],
    mask: Arc<Vec<bool>>,
) -> Result<Mat> {
    let n = input.len();
    if mask.len() != n * n {
        return Err(Error::input(format!("mask has {} entries for {n} positions", mask.len())));
    }
    forward_with_mode(cfg, w, input, Some(positions), AttnMode::Explicit(mask))
}

fn forward_with_mode(
    cfg: &LmConfig,
    w: &LmWeights,
    input: LmInput<'_>,
    positions: Option<&[usize]>,
    mode: AttnMode,
) -> Result<Mat> {
    cfg.validate()?;
    let n = input.len();
    if n > cfg.max_context {
        return Err(Error::Budget(format!("{n} tokens exceed max context {}", cfg.max_context)));
    }
    if n == 0 {
        return Ok(Mat::zeros(0, cfg.vocab));
    }
    let positions = check_positions(n, positions)?;
    let mut g = Graph::new();
    let vars = LmVars::register(&mut g, w, false);
    let x = input_var(&mut g, cfg, &vars, &input)?;
    let span = Span {
        start: 0,
        len: n,
        positions: Arc::new(positions),
        mode,
    };
    let logits = lm_graph(&mut g, cfg, &vars, x, &[span], None);
    let out = g.value(logits).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(out)
}

/// Incremental decoding state for several independent sequences that share
/// one set of weights. Each step runs all sequences through the same
/// matrix products.
pub struct DecodeSession<'a> {
    cfg: &'a LmConfig,
    weights: &'a LmWeights,
    caches: Vec<KvCache>,
    lengths: Vec<usize>,
    last_logits: Mat,
}

impl<'a> DecodeSession<'a> {
    /// Prefills every prompt and keeps the logits of each last position.
    pub fn prefill(cfg: &'a LmConfig, weights: &'a LmWeights, prompts: &[LmInput<'_>]) -> Result<Self> {
        cfg.validate()?;
        if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
            return Err(Error::input("every prompt must be non-empty"));
        }
        for p in prompts {
            if p.len() > cfg.max_context {
                return Err(Error::Budget(format!(
                    "prompt of {} tokens exceeds max context {}",
                    p.len(),
                    cfg.max_context
                )));
            }
        }
        let mut g = Graph::new();
        let vars = LmVars::register(&mut g, weights, false);
        let mut parts = Vec::with_capacity(prompts.len());
        let mut spans = Vec::with_capacity(prompts.len());
        let mut start = 0;
        for p in prompts {
            parts.push(input_var(&mut g, cfg, &vars, p)?);
            spans.push(Span::causal(start, (0..p.len()).collect()));
            start += p.len();
        }
        let x = g.concat_rows(&parts);
        let mut caches = vec![KvCache::new(cfg.layers); prompts.len()];
        let logits = lm_graph(&mut g, cfg, &vars, x, &spans, Some(&mut caches));
        let lv = g.value(logits);
        let rows: Vec<Vec<f64>> = spans.iter().map(|s| lv.row(s.start + s.len - 1).to_vec()).collect();
        Ok(DecodeSession {
            cfg,
            weights,
            caches,
            lengths: prompts.iter().map(LmInput::len).collect(),
            last_logits: Mat::from_rows(&rows),
        })
    }

    /// Logits at the last position of each sequence.
    pub fn logits(&self) -> &Mat {
        &self.last_logits
    }

    pub fn greedy_next(&self) -> Vec<u32> {
        (0..self.last_logits.rows()).map(|r| self.last_logits.argmax_row(r) as u32).collect()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Appends one token to each sequence.
    pub fn step(&mut self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.caches.len() {
            return Err(Error::input(format!(
                "{} tokens for {} sequences",
                tokens.len(),
                self.caches.len()
            )));
        }
        if let Some(len) = self.lengths.iter().find(|&&l| l + 1 > self.cfg.max_context) {
            return Err(Error::Budget(format!("sequence of {len} tokens is at max context")));
        }
        check_ids(self.cfg, tokens)?;
        let mut g = Graph::new();
        let vars = LmVars::register(&mut g, self.weights, false);
        let x = embed_ids(&mut g, &vars, tokens);
        let spans: Vec<Span> = self
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| Span::causal(i, vec![len]))
            .collect();
        let logits = lm_graph(&mut g, self.cfg, &vars, x, &spans, Some(&mut self.caches));
        self.last_logits = g.value(logits).clone();
        for l in self.lengths.iter_mut() {
            *l += 1;
        }
        Ok(())
    }
}

/// Greedy continuation of a single input; returns only the new tokens.
/// Stops after emitting `eos` or after `max_new` tokens.
pub fn generate(
    cfg: &LmConfig,
    w: &LmWeights,
    input: LmInput<'_>,
    max_new: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if input.is_empty() {
        return Err(Error::input("prompt must be non-empty"));
    }
    if input.len() + max_new > cfg.max_context {
        return Err(Error::Budget(format!(
            "prompt {} + max_new {max_new} exceeds max context {}",
            input.len(),
            cfg.max_context
        )));
    }
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut session = DecodeSession::prefill(cfg, w, &[input])?;
    loop {
        let next = session.greedy_next()[0];
        out.push(next);
        if Some(next) == eos || out.len() == max_new {
            return Ok(out);
        }
        session.step(&[next])?;
    }
}

/// Greedy decoding from token ids; returns the prompt followed by the
/// continuation.
pub fn decode_greedy(cfg: &LmConfig, w: &LmWeights, prompt: &[u32], max_new: usize, eos: Option<u32>) -> Result<Vec<u32>> {
    let new = generate(cfg, w, LmInput::Ids(prompt), max_new, eos)?;
    let mut out = prompt.to_vec();
    out.extend(new);
    Ok(out)
}
