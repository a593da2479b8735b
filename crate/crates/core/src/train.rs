//! Training stages as data: learning-rate schedules, module tags and freeze
//! masks, plus a small SGD loop over packed mixed-modality rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioEncoderVars, AudioProjectorVars};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lm::{self, EXTENDED_MAX_CONTEXT, DEFAULT_MAX_CONTEXT, LmVars};
use crate::model::OmniModel;
use crate::nn::Span;
use crate::sequencer::{self, AudioRef, ImageRef, Segment};
use crate::tensor::Mat;
use crate::tokenizer;
use crate::vision::{self, PatchGrid, ResamplerVars, VisionEncoderVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrKind {
    WarmupConstantCosine,
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
}

pub const PRETRAIN_DECAY_FRAC: f64 = 0.1;

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            kind: LrKind::Constant,
            lr_init: lr,
            lr_peak: lr,
            lr_final: lr,
            warmup_frac: 0.0,
            decay_frac: 0.0,
        }
    }

    /// Cosine from `from` down to `to` over the whole run.
    pub fn cosine(from: f64, to: f64) -> Self {
        LrSchedule {
            kind: LrKind::Cosine,
            lr_init: from,
            lr_peak: from,
            lr_final: to,
            warmup_frac: 0.0,
            decay_frac: 1.0,
        }
    }

    pub fn pretrain() -> Self {
        LrSchedule {
            kind: LrKind::WarmupConstantCosine,
            lr_init: 3e-5,
            lr_peak: 3e-4,
            lr_final: 3e-5,
            warmup_frac: 0.03,
            decay_frac: PRETRAIN_DECAY_FRAC,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_init, self.lr_peak, self.lr_final];
        if lrs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        let fracs = [self.warmup_frac, self.decay_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.warmup_frac + self.decay_frac > 1.0 + 1e-12 {
            return Err(Error::config("warmup_frac and decay_frac must be in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }

    fn cosine_between(hi: f64, lo: f64, progress: f64) -> f64 {
        lo + (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }

    /// Learning rate at `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        if step > total {
            return Err(Error::input(format!("step {step} is past the final step {total}")));
        }
        if total == 0 {
            return Ok(self.lr_init);
        }
        let s = step as f64;
        let t = total as f64;
        Ok(match self.kind {
            LrKind::Constant => self.lr_peak,
            LrKind::Cosine => Self::cosine_between(self.lr_peak, self.lr_final, s / t),
            LrKind::WarmupConstantCosine => {
                let warm = self.warmup_frac * t;
                let decay_start = t - self.decay_frac * t;
                if s < warm {
                    self.lr_init + (self.lr_peak - self.lr_init) * s / warm
                } else if s < decay_start || decay_start >= t {
                    self.lr_peak
                } else {
                    Self::cosine_between(self.lr_peak, self.lr_final, (s - decay_start) / (t - decay_start))
                }
            }
        })
    }
}

/// Warmup 3e-5 to 3e-4 over 3% of steps, flat, cosine back to 3e-5 over
/// the last 10%.
pub fn pretrain_lr(step: usize, total: usize) -> Result<f64> {
    LrSchedule::pretrain().lr_at(step, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleTag {
    #[serde(rename = "lm")]
    Lm,
    #[serde(rename = "vision.encoder")]
    VisionEncoder,
    #[serde(rename = "vision.connector")]
    VisionConnector,
    #[serde(rename = "audio.encoder")]
    AudioEncoder,
    #[serde(rename = "audio.connector")]
    AudioConnector,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 5] = [
        ModuleTag::Lm,
        ModuleTag::VisionEncoder,
        ModuleTag::VisionConnector,
        ModuleTag::AudioEncoder,
        ModuleTag::AudioConnector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::Lm => "lm",
            ModuleTag::VisionEncoder => "vision.encoder",
            ModuleTag::VisionConnector => "vision.connector",
            ModuleTag::AudioEncoder => "audio.encoder",
            ModuleTag::AudioConnector => "audio.connector",
        }
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub trainable: BTreeSet<ModuleTag>,
    pub schedule: LrSchedule,
    pub context_len: usize,
}

impl StagePlan {
    pub fn new(
        name: impl Into<String>,
        trainable: impl IntoIterator<Item = ModuleTag>,
        schedule: LrSchedule,
        context_len: usize,
    ) -> Result<Self> {
        let plan = StagePlan {
            name: name.into(),
            trainable: trainable.into_iter().collect(),
            schedule,
            context_len,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::config(format!("stage {} trains nothing", self.name)));
        }
        if self.context_len != DEFAULT_MAX_CONTEXT && self.context_len != EXTENDED_MAX_CONTEXT {
            return Err(Error::config(format!(
                "stage {} context {} is not {DEFAULT_MAX_CONTEXT} or {EXTENDED_MAX_CONTEXT}",
                self.name, self.context_len
            )));
        }
        self.schedule.validate()
    }

    pub fn trains(&self, tag: ModuleTag) -> bool {
        self.trainable.contains(&tag)
    }
}

/// The nine stages in training order.
pub fn builtin_stages() -> Vec<StagePlan> {
    use ModuleTag::*;
    let mk = |name: &str, tags: &[ModuleTag], schedule, ctx| {
        StagePlan::new(name, tags.iter().copied(), schedule, ctx).expect("builtin stage is valid")
    };
    vec![
        mk("pretrain", &[Lm], LrSchedule::pretrain(), DEFAULT_MAX_CONTEXT),
        mk("continue-pretrain", &[Lm], LrSchedule::cosine(3e-5, 3e-6), EXTENDED_MAX_CONTEXT),
        mk("sft-4k", &[Lm], LrSchedule::constant(1e-5), DEFAULT_MAX_CONTEXT),
        mk("sft-32k", &[Lm], LrSchedule::constant(5e-6), EXTENDED_MAX_CONTEXT),
        mk("vision-align-1", &[VisionConnector], LrSchedule::constant(3e-4), DEFAULT_MAX_CONTEXT),
        mk(
            "vision-align-2",
            &[VisionEncoder, VisionConnector],
            LrSchedule::constant(1e-4),
            DEFAULT_MAX_CONTEXT,
        ),
        mk("audio-align-1", &[AudioConnector], LrSchedule::constant(3e-4), DEFAULT_MAX_CONTEXT),
        mk(
            "audio-align-2",
            &[AudioEncoder, AudioConnector],
            LrSchedule::constant(3e-5),
            DEFAULT_MAX_CONTEXT,
        ),
        mk("omni-tune", &ModuleTag::ALL, LrSchedule::constant(1e-5), DEFAULT_MAX_CONTEXT),
    ]
}

pub fn find_stage(name: &str) -> Result<StagePlan> {
    builtin_stages()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::input(format!("unknown stage {name:?}")))
}

/// One tensor of a model registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub tag: String,
    pub numel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

/// Splits a registry into trainable and frozen tensors for `plan`.
pub fn apply_freeze(registry: &[TensorEntry], plan: &StagePlan) -> Result<ParamGroups> {
    let mut g = ParamGroups {
        trainable: Vec::new(),
        frozen: Vec::new(),
        trainable_params: 0,
        frozen_params: 0,
    };
    for e in registry {
        let tag: ModuleTag = e.tag.parse()?;
        if plan.trains(tag) {
            g.trainable.push(e.name.clone());
            g.trainable_params += e.numel;
        } else {
            g.frozen.push(e.name.clone());
            g.frozen_params += e.numel;
        }
    }
    Ok(g)
}

/// Inputs of one training sample, with media kept in raw form so that
/// gradients reach the encoders and connectors.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainPiece {
    Text(Vec<u32>),
    /// Normalised patch matrices, one per view.
    Image(Vec<Mat>),
    /// Log-mel matrices, one per clip.
    Audio(Vec<Mat>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub pieces: Vec<TrainPiece>,
}

impl TrainSample {
    pub fn text(ids: Vec<u32>) -> Self {
        TrainSample {
            pieces: vec![TrainPiece::Text(ids)],
        }
    }

    pub fn len(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                TrainPiece::Text(ids) => ids.len(),
                TrainPiece::Image(views) => 2 + views.len() * vision::QUERY_TOKENS,
                TrainPiece::Audio(mels) => 2 + mels.iter().map(|m| m.rows() / 2).sum::<usize>(),
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves a segment list into a [`TrainSample`] using the bundle's
/// front ends.
pub fn prepare_sample(model: &OmniModel, segments: &[Segment]) -> Result<TrainSample> {
    let vcfg = &model.config.vision;
    let acfg = &model.config.audio;
    let mut pieces = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        pieces.push(match seg {
            Segment::Text(ids) => TrainPiece::Text(ids.clone()),
            Segment::Image(img) => {
                let pixels = match img {
                    ImageRef::Path(p) => vision::Image::open(p)?,
                    ImageRef::Pixels(p) => (**p).clone(),
                    _ => return Err(Error::input(format!("segment {i}: training needs raw image pixels"))),
                };
                let (_, views) = vision::image_views(vcfg, &pixels)?;
                TrainPiece::Image(
                    views
                        .iter()
                        .map(|v| vision::patchify(vcfg, v))
                        .collect::<Result<_>>()?,
                )
            }
            Segment::Audio(a) => {
                let (samples, rate) = match a {
                    AudioRef::Path(p) => audio::load_wav(p)?,
                    AudioRef::Wave { samples, sample_rate } => ((**samples).clone(), *sample_rate),
                    _ => return Err(Error::input(format!("segment {i}: training needs raw audio samples"))),
                };
                TrainPiece::Audio(
                    audio::clip_features(acfg, &samples, rate)?
                        .into_iter()
                        .map(|(_, m)| m)
                        .collect(),
                )
            }
        });
    }
    Ok(TrainSample { pieces })
}

struct BundleVars {
    lm: LmVars,
    venc: VisionEncoderVars,
    vres: ResamplerVars,
    aenc: AudioEncoderVars,
    aproj: AudioProjectorVars,
}

impl BundleVars {
    fn register(g: &mut Graph, m: &OmniModel, plan: &StagePlan) -> Self {
        BundleVars {
            lm: LmVars::register(g, &m.lm, plan.trains(ModuleTag::Lm)),
            venc: VisionEncoderVars::register(g, &m.vision_encoder, plan.trains(ModuleTag::VisionEncoder)),
            vres: ResamplerVars::register(g, &m.resampler, plan.trains(ModuleTag::VisionConnector)),
            aenc: AudioEncoderVars::register(g, &m.audio_encoder, plan.trains(ModuleTag::AudioEncoder)),
            aproj: AudioProjectorVars::register(g, &m.audio_projector, plan.trains(ModuleTag::AudioConnector)),
        }
    }

    /// Handles in [`OmniModel::tagged_params`] order.
    fn handles(&self) -> Vec<Var> {
        let mut out = self.lm.handles();
        out.extend(self.venc.handles());
        out.extend(self.vres.handles());
        out.extend(self.aenc.handles());
        out.extend(self.aproj.handles());
        out
    }
}

fn markers(model: &OmniModel, start: &str, end: &str) -> Result<(u32, u32)> {
    let get = |n: &str| {
        model
            .tokenizer
            .special_id(n)
            .ok_or_else(|| Error::input(format!("tokenizer has no {n} special token")))
    };
    Ok((get(start)?, get(end)?))
}

/// Embeds one sample on the graph; returns rows and per-position token ids.
fn sample_graph(
    g: &mut Graph,
    model: &OmniModel,
    vars: &BundleVars,
    sample: &TrainSample,
) -> Result<(Var, Vec<Option<u32>>)> {
    let cfg = &model.config;
    let mut parts = Vec::new();
    let mut ids_out = Vec::new();
    let text = |g: &mut Graph, ids: &[u32], parts: &mut Vec<Var>, ids_out: &mut Vec<Option<u32>>| -> Result<()> {
        lm::check_ids(&cfg.lm, ids)?;
        parts.push(lm::embed_ids(g, &vars.lm, ids));
        ids_out.extend(ids.iter().map(|&i| Some(i)));
        Ok(())
    };
    for piece in &sample.pieces {
        match piece {
            TrainPiece::Text(ids) => text(g, ids, &mut parts, &mut ids_out)?,
            TrainPiece::Image(views) => {
                let (s, e) = markers(model, tokenizer::IMG_START, tokenizer::IMG_END)?;
                text(g, &[s], &mut parts, &mut ids_out)?;
                let grid = PatchGrid::square(cfg.vision.grid_side());
                for v in views {
                    let x = g.input(v.clone());
                    let f = vision::encode_view_graph(g, &cfg.vision, &vars.venc, x);
                    let t = vision::resample_graph(g, &cfg.vision, &vars.vres, f, grid)?;
                    parts.push(t.tokens);
                    ids_out.extend(std::iter::repeat_n(None, vision::QUERY_TOKENS));
                }
                text(g, &[e], &mut parts, &mut ids_out)?;
            }
            TrainPiece::Audio(mels) => {
                let (s, e) = markers(model, tokenizer::AUDIO_START, tokenizer::AUDIO_END)?;
                text(g, &[s], &mut parts, &mut ids_out)?;
                for m in mels {
                    let x = g.input(m.clone());
                    let st = audio::encode_clip_graph(g, &cfg.audio, &vars.aenc, x)?;
                    let t = audio::project_graph(g, &vars.aproj, st);
                    ids_out.extend(std::iter::repeat_n(None, g.value(t).rows()));
                    parts.push(t);
                }
                text(g, &[e], &mut parts, &mut ids_out)?;
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::input("empty training sample"));
    }
    Ok((g.concat_rows(&parts), ids_out))
}

/// Rows packed from training samples by the sequencer's shuffle-and-fill.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub samples: Vec<TrainSample>,
    pub plan: sequencer::PackPlan,
}

impl TrainBatch {
    pub fn pack(samples: Vec<TrainSample>, max_len: usize, seed: u64) -> Result<Self> {
        let lengths: Vec<usize> = samples.iter().map(TrainSample::len).collect();
        let plan = sequencer::plan_packing(&lengths, max_len, seed)?;
        Ok(TrainBatch { samples, plan })
    }
}

/// Mean next-token cross-entropy over every packed row; targets are text
/// and marker tokens within the same document.
fn batch_loss(g: &mut Graph, model: &OmniModel, vars: &BundleVars, batch: &TrainBatch) -> Result<Var> {
    let mut embedded: BTreeMap<usize, (Var, Vec<Option<u32>>)> = BTreeMap::new();
    let mut xs = Vec::new();
    let mut spans = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for row in &batch.plan.rows {
        for p in row {
            if !embedded.contains_key(&p.sample) {
                let e = sample_graph(g, model, vars, &batch.samples[p.sample])?;
                embedded.insert(p.sample, e);
            }
            let (x, ids) = &embedded[&p.sample];
            let x = *x;
            xs.push(g.slice_rows(x, 0, p.kept));
            spans.push(Span::causal(offset, (0..p.kept).collect()));
            for t in 0..p.kept {
                let next = if t + 1 < p.kept { ids[t + 1] } else { None };
                targets.push(next.map(|v| v as usize));
            }
            offset += p.kept;
        }
    }
    if targets.iter().all(Option::is_none) {
        return Err(Error::input("batch has no next-token targets"));
    }
    let x = g.concat_rows(&xs);
    let logits = lm::lm_graph(g, &model.config.lm, &vars.lm, x, &spans, None);
    Ok(g.cross_entropy(logits, Arc::new(targets)))
}

/// Loss and per-tensor gradients (trainable tensors only), named as in
/// [`OmniModel::tagged_params`].
pub fn loss_and_grads(model: &OmniModel, batch: &TrainBatch, plan: &StagePlan) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut g = Graph::new();
    let vars = BundleVars::register(&mut g, model, plan);
    let loss = batch_loss(&mut g, model, &vars, batch)?;
    let value = g.value(loss).get(0, 0);
    let mut grads = g.backward(loss);
    let out = vars
        .handles()
        .into_iter()
        .map(|h| if g.needs_grad(h) { grads.take(h) } else { None })
        .collect();
    Ok((value, out))
}

pub fn batch_loss_value(model: &OmniModel, batch: &TrainBatch, plan: &StagePlan) -> Result<f64> {
    let mut g = Graph::new();
    let vars = BundleVars::register(&mut g, model, plan);
    let loss = batch_loss(&mut g, model, &vars, batch)?;
    Ok(g.value(loss).get(0, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error `|a - n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compares backprop against central differences on `coords` randomly
/// sampled trainable coordinates.
pub fn check_gradients(
    model: &OmniModel,
    batch: &TrainBatch,
    plan: &StagePlan,
    coords: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch, plan)?;
    let candidates: Vec<usize> = grads
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|_| i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::config("plan leaves no trainable tensors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..coords {
        let t = candidates[rng.random_range(0..candidates.len())];
        let grad = grads[t].as_ref().expect("candidate has a gradient");
        let k = rng.random_range(0..grad.len());
        let eval = |probe: &mut OmniModel, delta: f64| -> Result<f64> {
            let original = {
                let mut params = probe.tagged_params_mut();
                let m = Arc::make_mut(&mut *params[t].2);
                let original = m.data()[k];
                m.data_mut()[k] = original + delta;
                original
            };
            let v = batch_loss_value(probe, batch, plan);
            let mut params = probe.tagged_params_mut();
            Arc::make_mut(&mut *params[t].2).data_mut()[k] = original;
            v
        };
        let plus = eval(&mut probe, h)?;
        let minus = eval(&mut probe, -h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(grad.data()[k], numeric, 1e-8);
        report.checked += 1;
        if err < tol {
            report.passed += 1;
        }
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

/// Maximum bundle size the SGD loop accepts.
pub const TOY_PARAM_LIMIT: usize = 100_000;

/// Full-batch SGD for `steps` steps. Frozen tensors are never touched.
pub fn train_toy(model: &mut OmniModel, batch: &TrainBatch, plan: &StagePlan, steps: usize) -> Result<TrainReport> {
    plan.validate()?;
    let total = model.num_params();
    if total > TOY_PARAM_LIMIT {
        return Err(Error::config(format!(
            "train_toy is limited to {TOY_PARAM_LIMIT} parameters, bundle has {total}"
        )));
    }
    if batch.plan.max_len > plan.context_len {
        return Err(Error::config(format!(
            "batch rows of {} exceed stage context {}",
            batch.plan.max_len, plan.context_len
        )));
    }
    let groups = apply_freeze(&model.registry(), plan)?;
    let mut report = TrainReport {
        stage: plan.name.clone(),
        steps,
        losses: Vec::with_capacity(steps),
        lrs: Vec::with_capacity(steps),
        trainable_params: groups.trainable_params,
        frozen_params: groups.frozen_params,
    };
    for step in 0..steps {
        let lr = plan.schedule.lr_at(step, steps)?;
        let (loss, grads) = loss_and_grads(model, batch, plan)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        report.losses.push(loss);
        report.lrs.push(lr);
        if lr == 0.0 {
            continue;
        }
        for ((_, tag, w), grad) in model.tagged_params_mut().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            debug_assert!(plan.trains(tag));
            let m = Arc::make_mut(w);
            for (v, d) in m.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * d;
            }
        }
    }
    Ok(report)
}
