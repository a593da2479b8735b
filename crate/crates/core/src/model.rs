//! The full bundle (tokenizer, language model, vision and audio paths) and
//! its on-disk checkpoint format.
//!
//! A checkpoint directory holds `config.json`, `tokenizer.json`,
//! `manifest.json` (name, shape, file, byte offset per tensor) and `tensors.bin`
//! (little-endian f32, concatenated in manifest order).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioConfig, AudioEncoderWeights, AudioModel, AudioProjector};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmWeights};
use crate::nn::Parameters;
use crate::sequencer::MediaModels;
use crate::tensor::Mat;
use crate::tokenizer::{default_specials, TokenizerModel};
use crate::train::{ModuleTag, TensorEntry};
use crate::vision::{ResamplerWeights, VisionConfig, VisionEncoderWeights, VisionModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmniConfig {
    pub lm: LmConfig,
    pub vision: VisionConfig,
    pub audio: AudioConfig,
}

impl OmniConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.vision.validate()?;
        self.audio.validate()
    }

    /// Default desk-scale shapes for a given vocabulary.
    pub fn toy(vocab: usize) -> Self {
        OmniConfig {
            lm: LmConfig::toy(vocab),
            vision: VisionConfig::default(),
            audio: AudioConfig::default(),
        }
    }

    /// Shapes small enough for the SGD loop (well under 1e5 parameters).
    pub fn tiny(vocab: usize) -> Self {
        OmniConfig {
            lm: LmConfig {
                hidden: 32,
                layers: 2,
                heads: 4,
                kv_heads: 2,
                ffn: 64,
                ..LmConfig::toy(vocab)
            },
            vision: VisionConfig {
                image_size: 32,
                patch: 8,
                feat: 16,
                layers: 1,
                heads: 2,
                ffn: 32,
                resampler_heads: 2,
                max_grid: 8,
                ..VisionConfig::default()
            },
            audio: AudioConfig {
                feat: 16,
                layers: 1,
                heads: 2,
                ffn: 32,
                ..AudioConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmniModel {
    pub config: OmniConfig,
    pub tokenizer: TokenizerModel,
    pub lm: LmWeights,
    pub vision_encoder: VisionEncoderWeights,
    pub resampler: ResamplerWeights,
    pub audio_encoder: AudioEncoderWeights,
    pub audio_projector: AudioProjector,
}

/// `(qualified name, module tag, tensor)`.
pub type TaggedParam<'a> = (String, ModuleTag, &'a Arc<Mat>);
pub type TaggedParamMut<'a> = (String, ModuleTag, &'a mut Arc<Mat>);

impl OmniModel {
    pub fn init(config: OmniConfig, tokenizer: TokenizerModel, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.lm.vocab {
            return Err(Error::config(format!(
                "tokenizer has {} ids, language model vocabulary is {}",
                tokenizer.vocab_size(),
                config.lm.vocab
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.random::<u64>();
        let hidden = config.lm.hidden;
        Ok(OmniModel {
            lm: LmWeights::init(&config.lm, next()),
            vision_encoder: VisionEncoderWeights::init(&config.vision, next()),
            resampler: ResamplerWeights::init(&config.vision, hidden, next()),
            audio_encoder: AudioEncoderWeights::init(&config.audio, next()),
            audio_projector: AudioProjector::init(config.audio.feat, hidden, next()),
            config,
            tokenizer,
        })
    }

    /// Byte-level tokenizer with default specials and toy shapes.
    pub fn toy(seed: u64) -> Self {
        let tok = TokenizerModel::byte_level(default_specials());
        let cfg = OmniConfig::toy(tok.vocab_size());
        Self::init(cfg, tok, seed).expect("toy configuration is valid")
    }

    pub fn tiny(seed: u64) -> Self {
        let tok = TokenizerModel::byte_level(default_specials());
        let cfg = OmniConfig::tiny(tok.vocab_size());
        Self::init(cfg, tok, seed).expect("tiny configuration is valid")
    }

    pub fn tagged_params(&self) -> Vec<TaggedParam<'_>> {
        let mut out = Vec::new();
        tag_all(&mut out, "lm", ModuleTag::Lm, self.lm.params());
        tag_all(&mut out, "vision.encoder", ModuleTag::VisionEncoder, self.vision_encoder.params());
        tag_all(&mut out, "vision.connector", ModuleTag::VisionConnector, self.resampler.params());
        tag_all(&mut out, "audio.encoder", ModuleTag::AudioEncoder, self.audio_encoder.params());
        tag_all(&mut out, "audio.connector", ModuleTag::AudioConnector, self.audio_projector.params());
        out
    }

    pub fn tagged_params_mut(&mut self) -> Vec<TaggedParamMut<'_>> {
        let mut out = Vec::new();
        tag_all(&mut out, "lm", ModuleTag::Lm, self.lm.params_mut());
        tag_all(&mut out, "vision.encoder", ModuleTag::VisionEncoder, self.vision_encoder.params_mut());
        tag_all(&mut out, "vision.connector", ModuleTag::VisionConnector, self.resampler.params_mut());
        tag_all(&mut out, "audio.encoder", ModuleTag::AudioEncoder, self.audio_encoder.params_mut());
        tag_all(&mut out, "audio.connector", ModuleTag::AudioConnector, self.audio_projector.params_mut());
        out
    }

    pub fn registry(&self) -> Vec<TensorEntry> {
        self.tagged_params()
            .into_iter()
            .map(|(name, tag, m)| TensorEntry {
                name,
                tag: tag.as_str().to_string(),
                numel: m.len(),
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tagged_params().iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn vision_model(&self) -> VisionModel<'_> {
        VisionModel {
            config: &self.config.vision,
            encoder: &self.vision_encoder,
            resampler: &self.resampler,
        }
    }

    pub fn audio_model(&self) -> AudioModel<'_> {
        AudioModel {
            config: &self.config.audio,
            encoder: &self.audio_encoder,
            projector: &self.audio_projector,
        }
    }

    pub fn media(&self) -> MediaModels<'_> {
        MediaModels {
            vision: Some(self.vision_model()),
            audio: Some(self.audio_model()),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let config = CheckpointConfig {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
        self.tokenizer.save(dir.join("tokenizer.json"))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, _, m) in self.tagged_params() {
            tensors.push(ManifestEntry {
                name,
                shape: [m.rows(), m.cols()],
                file: TENSOR_FILE.into(),
                offset: blob.len(),
            });
            for v in m.data() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: "f32".into(),
            tensors,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::write(dir.join(TENSOR_FILE), blob)?;
        Ok(())
    }

    /// Loads and validates a checkpoint: every expected tensor present once
    /// with its configured shape, in bounds and finite.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: CheckpointConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        if config.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format {} is not supported",
                config.format_version
            )));
        }
        let tokenizer = TokenizerModel::load(dir.join("tokenizer.json"))?;
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.dtype != "f32" {
            return Err(Error::config(format!("tensor dtype {} is not supported", manifest.dtype)));
        }
        let blob = fs::read(dir.join(TENSOR_FILE))?;
        let mut model = Self::init(config.model, tokenizer, 0)?;
        let mut params = model.tagged_params_mut();
        if params.len() != manifest.tensors.len() {
            return Err(Error::config(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                params.len()
            )));
        }
        for (name, _, slot) in params.iter_mut() {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))?;
            let want = [slot.rows(), slot.cols()];
            if entry.shape != want {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: want.to_vec(),
                    found: entry.shape.to_vec(),
                });
            }
            if entry.file != TENSOR_FILE {
                return Err(Error::config(format!("tensor {name} lives in unknown file {}", entry.file)));
            }
            let n = want[0] * want[1];
            let bytes = blob
                .get(entry.offset..entry.offset + 4 * n)
                .ok_or_else(|| Error::config(format!("tensor {name} runs past the end of tensors.bin")))?;
            let data: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Mat::from_vec(want[0], want[1], data);
            if !m.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
            **slot = Arc::new(m);
        }
        drop(params);
        Ok(model)
    }
}

fn tag_all<T>(out: &mut Vec<(String, ModuleTag, T)>, prefix: &str, tag: ModuleTag, params: Vec<(String, T)>) {
    out.extend(params.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), tag, p)));
}

/// Loads a checkpoint directory, or builds a seeded toy bundle for the
/// pseudo-path `toy:SEED`.
pub fn open_checkpoint(spec: &str) -> Result<OmniModel> {
    match spec.strip_prefix("toy:") {
        Some(seed) => {
            let seed = seed
                .parse()
                .map_err(|_| Error::input(format!("toy checkpoint seed {seed:?} is not an integer")))?;
            Ok(OmniModel::toy(seed))
        }
        None => OmniModel::load(spec),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    format_version: u32,
    model: OmniConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    file: String,
    offset: usize,
}
