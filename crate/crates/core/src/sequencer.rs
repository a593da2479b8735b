//! Mixed-modality sequence assembly, token budgeting, chat templating and
//! shuffle-and-concatenate packing with per-document attention isolation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{self, AudioConfig, AudioModel, AudioTokens};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmWeights};
use crate::nn::Span;
use crate::tensor::Mat;
use crate::tokenizer::{self, TokenizerModel};
use crate::vision::{self, Image, VisionConfig, VisionModel, VisionTokens};

pub const DEFAULT_PACK_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Pixels(Arc<Image>),
    /// Dimensions only; enough for budgeting, not for assembly.
    Size { width: usize, height: usize },
    Encoded(Arc<VisionTokens>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AudioRef {
    Path(PathBuf),
    Wave { samples: Arc<Vec<f32>>, sample_rate: u32 },
    /// Length only; enough for budgeting, not for assembly.
    Length { num_samples: usize, sample_rate: u32 },
    Encoded(Arc<AudioTokens>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(Vec<u32>),
    Image(ImageRef),
    Audio(AudioRef),
}

impl Segment {
    pub fn modality(&self) -> Modality {
        match self {
            Segment::Text(_) => Modality::Text,
            Segment::Image(_) => Modality::Image,
            Segment::Audio(_) => Modality::Audio,
        }
    }
}

/// Per-modality position counts. Markers are the start/end tokens around
/// each media block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub text: usize,
    pub vision: usize,
    pub audio: usize,
    pub markers: usize,
}

impl TokenBudget {
    pub fn total(&self) -> usize {
        self.text + self.vision + self.audio + self.markers
    }
}

fn image_tokens(img: &ImageRef, cfg: &VisionConfig) -> Result<usize> {
    let (w, h) = match img {
        ImageRef::Encoded(t) => return Ok(t.len()),
        ImageRef::Size { width, height } => (*width, *height),
        ImageRef::Pixels(p) => (p.width, p.height),
        ImageRef::Path(p) => Image::dimensions(p)?,
    };
    Ok(vision::plan_slices(w, h, cfg.max_slices, cfg.image_size)?.token_count())
}

fn audio_tokens(a: &AudioRef, cfg: &AudioConfig) -> Result<usize> {
    let (n, rate) = match a {
        AudioRef::Encoded(t) => return Ok(t.len()),
        AudioRef::Length {
            num_samples,
            sample_rate,
        } => (*num_samples, *sample_rate),
        AudioRef::Wave { samples, sample_rate } => (samples.len(), *sample_rate),
        AudioRef::Path(p) => {
            let r = hound::WavReader::open(p)?;
            (r.duration() as usize, r.spec().sample_rate)
        }
    };
    audio::token_budget(n, rate, cfg.pad_clips)
}

fn segment_budget(seg: &Segment, vcfg: &VisionConfig, acfg: &AudioConfig) -> Result<TokenBudget> {
    Ok(match seg {
        Segment::Text(ids) => TokenBudget {
            text: ids.len(),
            ..Default::default()
        },
        Segment::Image(i) => TokenBudget {
            vision: image_tokens(i, vcfg)?,
            markers: 2,
            ..Default::default()
        },
        Segment::Audio(a) => TokenBudget {
            audio: audio_tokens(a, acfg)?,
            markers: 2,
            ..Default::default()
        },
    })
}

/// Counts assembly would produce, from slice and clip plans alone.
pub fn token_budget_with(segments: &[Segment], vcfg: &VisionConfig, acfg: &AudioConfig) -> Result<TokenBudget> {
    let mut total = TokenBudget::default();
    for seg in segments {
        let b = segment_budget(seg, vcfg, acfg)?;
        total.text += b.text;
        total.vision += b.vision;
        total.audio += b.audio;
        total.markers += b.markers;
    }
    Ok(total)
}

/// [`token_budget_with`] under default vision and audio settings.
pub fn token_budget(segments: &[Segment]) -> Result<TokenBudget> {
    token_budget_with(segments, &VisionConfig::default(), &AudioConfig::default())
}

/// An embedded sequence ready for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct OmniSequence {
    pub embeddings: Mat,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
    pub doc_ids: Vec<u32>,
    /// Token id at text and marker positions, for next-token targets.
    pub token_ids: Vec<Option<u32>>,
}

impl OmniSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_doc_id(mut self, id: u32) -> Self {
        self.doc_ids.iter_mut().for_each(|d| *d = id);
        self
    }

    pub fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|x| **x == m).count()
    }
}

/// Encoders available to [`assemble`]. A missing model makes that modality
/// unresolvable unless the segment is already encoded.
#[derive(Default)]
pub struct MediaModels<'a> {
    pub vision: Option<VisionModel<'a>>,
    pub audio: Option<AudioModel<'a>>,
}

impl MediaModels<'_> {
    fn vision_cfg(&self) -> VisionConfig {
        self.vision.as_ref().map(|v| v.config.clone()).unwrap_or_default()
    }

    fn audio_cfg(&self) -> AudioConfig {
        self.audio.as_ref().map(|a| a.config.clone()).unwrap_or_default()
    }
}

fn marker(tok: &TokenizerModel, name: &str) -> Result<u32> {
    tok.special_id(name)
        .ok_or_else(|| Error::input(format!("tokenizer has no {name} special token")))
}

fn resolve_image(img: &ImageRef, media: &MediaModels<'_>, index: usize) -> Result<Mat> {
    if let ImageRef::Encoded(t) = img {
        return Ok(t.to_mat());
    }
    let model = media
        .vision
        .as_ref()
        .ok_or_else(|| Error::input(format!("segment {index}: no vision model to encode the image")))?;
    let pixels = match img {
        ImageRef::Path(p) => Arc::new(Image::open(p)?),
        ImageRef::Pixels(p) => p.clone(),
        ImageRef::Size { .. } => {
            return Err(Error::input(format!("segment {index}: image has no pixel data")));
        }
        ImageRef::Encoded(_) => unreachable!(),
    };
    Ok(vision::encode_image(model, &pixels)?.to_mat())
}

fn resolve_audio(a: &AudioRef, media: &MediaModels<'_>, index: usize) -> Result<Mat> {
    if let AudioRef::Encoded(t) = a {
        return Ok(t.embeddings.clone());
    }
    let model = media
        .audio
        .as_ref()
        .ok_or_else(|| Error::input(format!("segment {index}: no audio model to encode the waveform")))?;
    let (samples, rate) = match a {
        AudioRef::Path(p) => {
            let (s, r) = audio::load_wav(p)?;
            (Arc::new(s), r)
        }
        AudioRef::Wave { samples, sample_rate } => (samples.clone(), *sample_rate),
        AudioRef::Length { .. } => {
            return Err(Error::input(format!("segment {index}: audio has no samples")));
        }
        AudioRef::Encoded(_) => unreachable!(),
    };
    Ok(audio::encode_audio(model, &samples, rate)?.embeddings)
}

/// Embeds text through the LM table and wraps encoded media in marker
/// tokens; positions run from 0.
pub fn assemble(
    segments: &[Segment],
    tok: &TokenizerModel,
    cfg: &LmConfig,
    lm: &LmWeights,
    media: &MediaModels<'_>,
) -> Result<OmniSequence> {
    let vcfg = media.vision_cfg();
    let acfg = media.audio_cfg();
    let mut running = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        running += segment_budget(seg, &vcfg, &acfg)?.total();
        if running > cfg.max_context {
            return Err(Error::Budget(format!(
                "segment {i} ({}) brings the sequence to {running} positions, over max context {}",
                seg.modality(),
                cfg.max_context
            )));
        }
    }

    let mut b = SeqBuilder {
        cfg,
        lm,
        rows: Vec::with_capacity(segments.len() * 3),
        modality: Vec::with_capacity(running),
        token_ids: Vec::with_capacity(running),
    };
    for (i, seg) in segments.iter().enumerate() {
        match seg {
            Segment::Text(ids) => b.push_ids(ids)?,
            Segment::Image(img) => {
                let block = resolve_image(img, media, i)?;
                b.push_ids(&[marker(tok, tokenizer::IMG_START)?])?;
                b.push_media(block, Modality::Image, i)?;
                b.push_ids(&[marker(tok, tokenizer::IMG_END)?])?;
            }
            Segment::Audio(a) => {
                let block = resolve_audio(a, media, i)?;
                b.push_ids(&[marker(tok, tokenizer::AUDIO_START)?])?;
                b.push_media(block, Modality::Audio, i)?;
                b.push_ids(&[marker(tok, tokenizer::AUDIO_END)?])?;
            }
        }
    }
    let embeddings = if b.rows.is_empty() {
        Mat::zeros(0, cfg.hidden)
    } else {
        Mat::concat_rows(&b.rows.iter().collect::<Vec<_>>())
    };
    let len = embeddings.rows();
    if len > cfg.max_context {
        return Err(Error::Budget(format!("assembled {len} positions, over max context {}", cfg.max_context)));
    }
    Ok(OmniSequence {
        embeddings,
        positions: (0..len).collect(),
        modality: b.modality,
        doc_ids: vec![0; len],
        token_ids: b.token_ids,
    })
}

struct SeqBuilder<'a> {
    cfg: &'a LmConfig,
    lm: &'a LmWeights,
    rows: Vec<Mat>,
    modality: Vec<Modality>,
    token_ids: Vec<Option<u32>>,
}

impl SeqBuilder<'_> {
    fn push_ids(&mut self, ids: &[u32]) -> Result<()> {
        crate::lm::check_ids(self.cfg, ids)?;
        let mut e = Mat::zeros(ids.len(), self.cfg.hidden);
        for (r, &id) in ids.iter().enumerate() {
            e.row_mut(r).copy_from_slice(self.lm.embed.row(id as usize));
        }
        self.rows.push(e);
        self.modality.extend(std::iter::repeat_n(Modality::Text, ids.len()));
        self.token_ids.extend(ids.iter().map(|&i| Some(i)));
        Ok(())
    }

    fn push_media(&mut self, block: Mat, m: Modality, index: usize) -> Result<()> {
        let n = block.rows();
        if n == 0 {
            return Ok(());
        }
        if block.cols() != self.cfg.hidden {
            return Err(Error::Shape {
                name: format!("segment {index} {m} tokens"),
                expected: vec![n, self.cfg.hidden],
                found: vec![n, block.cols()],
            });
        }
        self.rows.push(block);
        self.modality.extend(std::iter::repeat_n(m, n));
        self.token_ids.extend(std::iter::repeat_n(None, n));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::System => tokenizer::ROLE_SYSTEM,
            Role::User => tokenizer::ROLE_USER,
            Role::Assistant => tokenizer::ROLE_ASSISTANT,
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(Error::input(format!("unknown role {other:?}"))),
        }
    }
}

/// Wraps each turn as `[role marker] segments.. [turn end]`.
pub fn chat_template(turns: &[(Role, Vec<Segment>)], tok: &TokenizerModel) -> Result<Vec<Segment>> {
    let end = marker(tok, tokenizer::TURN_END)?;
    let mut out = Vec::new();
    for (role, segs) in turns {
        out.push(Segment::Text(vec![marker(tok, role.marker())?]));
        out.extend(segs.iter().cloned());
        out.push(Segment::Text(vec![end]));
    }
    Ok(out)
}

/// Human-readable rendering of a segment list; media become placeholders.
pub fn render_segments(segments: &[Segment], tok: &TokenizerModel) -> String {
    let mut s = String::new();
    for seg in segments {
        match seg {
            Segment::Text(ids) => s.push_str(&tok.render(ids)),
            Segment::Image(img) => {
                let desc = match img {
                    ImageRef::Path(p) => p.display().to_string(),
                    ImageRef::Pixels(p) => format!("{}x{}", p.width, p.height),
                    ImageRef::Size { width, height } => format!("{width}x{height}"),
                    ImageRef::Encoded(t) => format!("{} tokens", t.len()),
                };
                s.push_str(&format!("{}[image {desc}]{}", tokenizer::IMG_START, tokenizer::IMG_END));
            }
            Segment::Audio(a) => {
                let desc = match a {
                    AudioRef::Path(p) => p.display().to_string(),
                    AudioRef::Wave { samples, sample_rate } => format!("{} samples @ {sample_rate} Hz", samples.len()),
                    AudioRef::Length {
                        num_samples,
                        sample_rate,
                    } => format!("{num_samples} samples @ {sample_rate} Hz"),
                    AudioRef::Encoded(t) => format!("{} tokens", t.len()),
                };
                s.push_str(&format!("{}[audio {desc}]{}", tokenizer::AUDIO_START, tokenizer::AUDIO_END));
            }
        }
    }
    s
}

/// A piece of one sample placed in a packed row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub sample: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub sample: usize,
    pub original: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackPlan {
    pub max_len: usize,
    pub order: Vec<usize>,
    pub rows: Vec<Vec<Placement>>,
    pub truncations: Vec<Truncation>,
}

impl PackPlan {
    pub fn row_lengths(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().map(|p| p.kept).sum()).collect()
    }
}

/// Greedy fill of samples in the given order: a new row starts whenever
/// the next sample does not fit. Over-long samples are tail-cut.
pub fn plan_packing_ordered(lengths: &[usize], order: &[usize], max_len: usize) -> Result<PackPlan> {
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let mut rows: Vec<Vec<Placement>> = Vec::new();
    let mut truncations = Vec::new();
    let mut current: Vec<Placement> = Vec::new();
    let mut used = 0usize;
    for &s in order {
        let original = *lengths
            .get(s)
            .ok_or_else(|| Error::input(format!("order names sample {s} of {}", lengths.len())))?;
        let kept = original.min(max_len);
        if kept < original {
            truncations.push(Truncation {
                sample: s,
                original,
                kept,
            });
        }
        if kept == 0 {
            continue;
        }
        if used + kept > max_len {
            rows.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(Placement { sample: s, kept });
        used += kept;
    }
    if !current.is_empty() {
        rows.push(current);
    }
    Ok(PackPlan {
        max_len,
        order: order.to_vec(),
        rows,
        truncations,
    })
}

/// Seeded Fisher-Yates shuffle followed by [`plan_packing_ordered`].
pub fn plan_packing(lengths: &[usize], max_len: usize, seed: u64) -> Result<PackPlan> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    plan_packing_ordered(lengths, &order, max_len)
}

/// One packed row: documents laid end to end, positions restarting at 0
/// for each.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRow {
    pub embeddings: Mat,
    pub positions: Vec<usize>,
    pub modality: Vec<Modality>,
    pub doc_ids: Vec<u32>,
    pub token_ids: Vec<Option<u32>>,
    /// `(sample index, start, len)` per document.
    pub documents: Vec<(usize, usize, usize)>,
}

impl PackedRow {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `len x len` allow-list: same document and not in the future.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for &(_, start, len) in &self.documents {
            for i in start..start + len {
                for j in start..=i {
                    m[i * n + j] = true;
                }
            }
        }
        m
    }

    /// One causal span per document, for span-aware forward passes.
    pub fn spans(&self) -> Vec<Span> {
        self.documents
            .iter()
            .map(|&(_, start, len)| Span::causal(start, self.positions[start..start + len].to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackReport {
    pub samples: usize,
    pub rows: usize,
    pub max_len: usize,
    pub seed: u64,
    pub input_tokens: usize,
    pub packed_tokens: usize,
    pub row_lengths: Vec<usize>,
    pub truncations: Vec<Truncation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub rows: Vec<PackedRow>,
    pub report: PackReport,
}

impl PackedBatch {
    /// SHA-256 over every row's contents, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.rows {
            h.update((row.len() as u64).to_le_bytes());
            for v in row.embeddings.data() {
                h.update(v.to_le_bytes());
            }
            for i in 0..row.len() {
                h.update((row.positions[i] as u64).to_le_bytes());
                h.update(row.doc_ids[i].to_le_bytes());
                h.update([row.modality[i] as u8]);
                h.update(row.token_ids[i].map_or(u64::MAX, u64::from).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn materialize(samples: &[OmniSequence], plan: &PackPlan, seed: u64) -> Result<PackedBatch> {
    let hidden = samples.first().map_or(0, |s| s.embeddings.cols());
    if let Some(bad) = samples.iter().position(|s| s.embeddings.cols() != hidden && !s.is_empty()) {
        return Err(Error::input(format!("sample {bad} has a different embedding width")));
    }
    let mut rows = Vec::with_capacity(plan.rows.len());
    for placements in &plan.rows {
        let mut parts = Vec::with_capacity(placements.len());
        let mut row = PackedRow {
            embeddings: Mat::zeros(0, hidden),
            positions: Vec::new(),
            modality: Vec::new(),
            doc_ids: Vec::new(),
            token_ids: Vec::new(),
            documents: Vec::new(),
        };
        for p in placements {
            let s = &samples[p.sample];
            let start = row.positions.len();
            parts.push(s.embeddings.slice_rows(0, p.kept));
            row.positions.extend(0..p.kept);
            row.modality.extend_from_slice(&s.modality[..p.kept]);
            row.doc_ids.extend_from_slice(&s.doc_ids[..p.kept]);
            row.token_ids.extend_from_slice(&s.token_ids[..p.kept]);
            row.documents.push((p.sample, start, p.kept));
        }
        row.embeddings = Mat::concat_rows(&parts.iter().collect::<Vec<_>>());
        rows.push(row);
    }
    let report = PackReport {
        samples: samples.len(),
        rows: rows.len(),
        max_len: plan.max_len,
        seed,
        input_tokens: samples.iter().map(OmniSequence::len).sum(),
        packed_tokens: rows.iter().map(PackedRow::len).sum(),
        row_lengths: plan.row_lengths(),
        truncations: plan.truncations.clone(),
    };
    Ok(PackedBatch { rows, report })
}

/// Shuffles, greedily packs into rows of at most `max_len`, and records
/// truncations.
pub fn pack_training(samples: &[OmniSequence], max_len: usize, seed: u64) -> Result<PackedBatch> {
    let lengths: Vec<usize> = samples.iter().map(OmniSequence::len).collect();
    let plan = plan_packing(&lengths, max_len, seed)?;
    for t in &plan.truncations {
        log::warn!("sample {} truncated from {} to {} positions", t.sample, t.original, t.kept);
    }
    materialize(samples, &plan, seed)
}

/// One entry of a JSON-lines sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub doc_id: String,
    #[serde(default)]
    pub role: Option<Role>,
    pub segments: Vec<ManifestSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub kind: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::input(format!("manifest line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

impl ManifestSample {
    /// Tokenises text and resolves media paths against `base_dir`.
    pub fn to_segments(&self, tok: &TokenizerModel, base_dir: &Path) -> Result<Vec<Segment>> {
        self.segments
            .iter()
            .map(|s| {
                let path = || {
                    s.path
                        .as_ref()
                        .map(|p| base_dir.join(p))
                        .ok_or_else(|| Error::input(format!("{}: {} segment without a path", self.doc_id, s.kind)))
                };
                Ok(match s.kind {
                    Modality::Text => {
                        let t = s
                            .text
                            .as_deref()
                            .ok_or_else(|| Error::input(format!("{}: text segment without text", self.doc_id)))?;
                        Segment::Text(tok.encode(t))
                    }
                    Modality::Image => Segment::Image(ImageRef::Path(path()?)),
                    Modality::Audio => Segment::Audio(AudioRef::Path(path()?)),
                })
            })
            .collect()
    }
}
