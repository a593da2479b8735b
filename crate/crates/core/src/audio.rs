//! Audio path: 30 s clip segmentation, log-mel front end, a small
//! convolutional + transformer encoder with temporal stride 2, and a linear
//! projector into the LLM embedding space (50 tokens per second).

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{block_forward, leaf, BlockContext, BlockShape, BlockVars, BlockWeights, NamedParam, NamedParamMut, Parameters, Span};
use crate::tensor::Mat;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 128;
pub const CLIP_SECONDS: usize = 30;
pub const CLIP_SAMPLES: usize = CLIP_SECONDS * SAMPLE_RATE as usize;
pub const LOG_FLOOR: f64 = 1e-10;
pub const ACCEPTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn num_frames(&self) -> usize {
        self.samples.len() / HOP
    }
}

/// Linear-interpolation resample; output length is `floor(n * to / from)`.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if !ACCEPTED_RATES.contains(&from) {
        return Err(Error::input(format!("unsupported sample rate {from} Hz")));
    }
    if from == to {
        return Ok(samples.to_vec());
    }
    let out_len = (samples.len() as u128 * to as u128 / from as u128) as usize;
    let step = from as f64 / to as f64;
    let last = samples.len().saturating_sub(1);
    Ok((0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let i0 = (t.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = t - i0 as f64;
            (samples[i0] as f64 * (1.0 - frac) + samples[i1] as f64 * frac) as f32
        })
        .collect())
}

/// Resamples to 16 kHz, then cuts consecutive non-overlapping 30 s clips.
pub fn segment_clips(samples: &[f32], sample_rate: u32) -> Result<Vec<AudioClip>> {
    if samples.is_empty() {
        return Err(Error::input("audio input is empty"));
    }
    let pcm = resample_linear(samples, sample_rate, SAMPLE_RATE)?;
    if pcm.is_empty() {
        return Err(Error::input("audio input is shorter than one sample at 16 kHz"));
    }
    Ok(pcm
        .chunks(CLIP_SAMPLES)
        .map(|c| AudioClip {
            samples: c.to_vec(),
            sample_rate: SAMPLE_RATE,
        })
        .collect())
}

/// Tokens one 16 kHz clip of `len` samples yields.
pub fn clip_tokens(len: usize) -> usize {
    len / HOP / 2
}

/// Tokens an input of `num_samples` at `sample_rate` yields across all clips.
pub fn token_budget(num_samples: usize, sample_rate: u32, pad_clips: bool) -> Result<usize> {
    if !ACCEPTED_RATES.contains(&sample_rate) {
        return Err(Error::input(format!("unsupported sample rate {sample_rate} Hz")));
    }
    let n = (num_samples as u128 * SAMPLE_RATE as u128 / sample_rate as u128) as usize;
    let full = n / CLIP_SAMPLES;
    let tail = n % CLIP_SAMPLES;
    let per_full = clip_tokens(CLIP_SAMPLES);
    let tail_tokens = match (tail, pad_clips) {
        (0, _) => 0,
        (_, true) => per_full,
        (t, false) => clip_tokens(t),
    };
    Ok(full * per_full + tail_tokens)
}

/// Reads 16-bit PCM or 32-bit float WAV, averaging channels to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::input(format!("unsupported WAV encoding {fmt:?} {bits}-bit")));
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_hz / f_sp + (f / min_log_hz).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_mel = 1000.0 / f_sp;
    if m < min_log_mel {
        m * f_sp
    } else {
        1000.0 * ((6.4f64.ln() / 27.0) * (m - min_log_mel)).exp()
    }
}

/// Centre frequency in Hz of each mel filter.
pub fn mel_centers(n_mels: usize, fmax: f64) -> Vec<f64> {
    let top = hz_to_mel(fmax);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Area-normalised triangular filters, `[n_mels x (n_fft/2 + 1)]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Mat {
    let fmax = sample_rate as f64 / 2.0;
    let top = hz_to_mel(fmax);
    let pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    let mut fb = Mat::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
            fb.set(m, k, w * enorm);
        }
    }
    fb
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn check_clip(clip: &AudioClip) -> Result<()> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::input(format!("clip is {} Hz, expected {SAMPLE_RATE}", clip.sample_rate)));
    }
    if clip.samples.len() > CLIP_SAMPLES {
        return Err(Error::input("clip is longer than 30 s"));
    }
    Ok(())
}

/// Pre-log mel energies `[frames x N_MELS]` of a 16 kHz clip: zero-padded
/// centred frames, periodic Hann window, power spectrum.
pub fn mel_energies(clip: &AudioClip) -> Result<Mat> {
    check_clip(clip)?;
    let frames = clip.num_frames();
    let window = hann(N_FFT);
    let fb = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let bins = N_FFT / 2 + 1;
    let mut power = Mat::zeros(frames, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let half = (N_FFT / 2) as isize;
    for t in 0..frames {
        for (j, b) in buf.iter_mut().enumerate() {
            let idx = (t * HOP) as isize + j as isize - half;
            let s = if idx >= 0 && (idx as usize) < clip.samples.len() {
                clip.samples[idx as usize] as f64
            } else {
                0.0
            };
            *b = Complex::new(s * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.row_mut(t).iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
    }
    let mut out = Mat::zeros(frames, N_MELS);
    crate::tensor::gemm(&power, false, &fb, true, &mut out, 1.0, 0.0);
    Ok(out)
}

/// `log10` with floor, clamp to 8 decades below the clip maximum, then
/// `(x + 4) / 4`.
pub fn log_mel_from_energies(energies: &Mat) -> Mat {
    let mut out = energies.clone();
    let mut max = f64::NEG_INFINITY;
    for v in out.data_mut() {
        *v = v.max(LOG_FLOOR).log10();
        max = max.max(*v);
    }
    for v in out.data_mut() {
        *v = (v.max(max - 8.0) + 4.0) / 4.0;
    }
    out
}

/// Normalised log-mel frames `[floor(len / 160) x 128]`.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<Mat> {
    Ok(log_mel_from_energies(&mel_energies(clip)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub n_mels: usize,
    pub feat: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub norm_eps: f64,
    /// Zero-pad short final clips to 30 s before encoding.
    #[serde(default)]
    pub pad_clips: bool,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            n_mels: N_MELS,
            feat: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            norm_eps: 1e-5,
            pad_clips: false,
        }
    }
}

impl AudioConfig {
    fn block_shape(&self) -> BlockShape {
        BlockShape {
            hidden: self.feat,
            heads: self.heads,
            kv_heads: self.heads,
            head_dim: self.feat / self.heads,
            ffn: self.ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.feat == 0 {
            return Err(Error::config("audio n_mels and feat must be positive"));
        }
        if self.heads == 0 || self.feat % self.heads != 0 {
            return Err(Error::config("audio feat must be divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoderWeights {
    pub conv1_w: Arc<Mat>,
    pub conv1_b: Arc<Mat>,
    pub conv2_w: Arc<Mat>,
    pub conv2_b: Arc<Mat>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Arc<Mat>,
}

impl AudioEncoderWeights {
    pub fn init(cfg: &AudioConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.block_shape();
        let k1 = 3 * cfg.n_mels;
        let k2 = 3 * cfg.feat;
        AudioEncoderWeights {
            conv1_w: Arc::new(Mat::randn(k1, cfg.feat, 1.0 / (k1 as f64).sqrt(), &mut rng)),
            conv1_b: Arc::new(Mat::zeros(1, cfg.feat)),
            conv2_w: Arc::new(Mat::randn(k2, cfg.feat, 1.0 / (k2 as f64).sqrt(), &mut rng)),
            conv2_b: Arc::new(Mat::zeros(1, cfg.feat)),
            blocks: (0..cfg.layers).map(|_| BlockWeights::init(&shape, &mut rng)).collect(),
            final_norm: Arc::new(Mat::filled(1, cfg.feat, 1.0)),
        }
    }
}

impl Parameters for AudioEncoderWeights {
    fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = vec![
            ("conv1_w".to_string(), &self.conv1_w),
            ("conv1_b".to_string(), &self.conv1_b),
            ("conv2_w".to_string(), &self.conv2_w),
            ("conv2_b".to_string(), &self.conv2_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}")));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = vec![
            ("conv1_w".to_string(), &mut self.conv1_w),
            ("conv1_b".to_string(), &mut self.conv1_b),
            ("conv2_w".to_string(), &mut self.conv2_w),
            ("conv2_b".to_string(), &mut self.conv2_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("blocks.{i}")));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }
}

/// Linear map from encoder states to LLM embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioProjector {
    pub w: Arc<Mat>,
    pub b: Arc<Mat>,
}

impl AudioProjector {
    pub fn init(feat: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioProjector {
            w: Arc::new(Mat::randn(feat, hidden, 1.0 / (feat as f64).sqrt(), &mut rng)),
            b: Arc::new(Mat::zeros(1, hidden)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

impl Parameters for AudioProjector {
    fn params(&self) -> Vec<NamedParam<'_>> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

pub struct AudioEncoderVars {
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
}

impl AudioEncoderVars {
    pub fn register(g: &mut Graph, w: &AudioEncoderWeights, trainable: bool) -> Self {
        AudioEncoderVars {
            conv1_w: leaf(g, &w.conv1_w, trainable),
            conv1_b: leaf(g, &w.conv1_b, trainable),
            conv2_w: leaf(g, &w.conv2_w, trainable),
            conv2_b: leaf(g, &w.conv2_b, trainable),
            blocks: w.blocks.iter().map(|b| BlockVars::register(g, b, trainable)).collect(),
            final_norm: leaf(g, &w.final_norm, trainable),
        }
    }

    pub fn handles(&self) -> Vec<Var> {
        let mut out = vec![self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b];
        for b in &self.blocks {
            out.extend(b.handles());
        }
        out.push(self.final_norm);
        out
    }
}

pub struct AudioProjectorVars {
    w: Var,
    b: Var,
}

impl AudioProjectorVars {
    pub fn register(g: &mut Graph, p: &AudioProjector, trainable: bool) -> Self {
        AudioProjectorVars {
            w: leaf(g, &p.w, trainable),
            b: leaf(g, &p.b, trainable),
        }
    }

    pub fn handles(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

/// Fixed sinusoidal table: sines in the first half of the width, cosines in
/// the second.
pub fn sinusoids(len: usize, width: usize) -> Mat {
    let half = width / 2;
    let inc = if half > 1 { 10_000f64.ln() / (half - 1) as f64 } else { 0.0 };
    let mut m = Mat::zeros(len, width);
    for t in 0..len {
        let row = m.row_mut(t);
        for i in 0..half {
            let a = t as f64 * (-inc * i as f64).exp();
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
    }
    m
}

pub fn encode_clip_graph(g: &mut Graph, cfg: &AudioConfig, vars: &AudioEncoderVars, mel: Var) -> Result<Var> {
    let frames = g.value(mel).rows();
    if frames < 2 {
        return Err(Error::input(format!("audio encoder needs at least 2 mel frames, got {frames}")));
    }
    if g.value(mel).cols() != cfg.n_mels {
        return Err(Error::input(format!(
            "mel frames have {} bins, encoder expects {}",
            g.value(mel).cols(),
            cfg.n_mels
        )));
    }
    let x = g.unfold(mel, 3, 1, 1, frames);
    let x = g.matmul(x, vars.conv1_w);
    let x = g.add_row(x, vars.conv1_b);
    let x = g.gelu(x);
    let states = frames / 2;
    let x = g.unfold(x, 3, 2, 1, states);
    let x = g.matmul(x, vars.conv2_w);
    let x = g.add_row(x, vars.conv2_b);
    let x = g.gelu(x);
    let pos = g.input(sinusoids(states, cfg.feat));
    let mut h = g.add(x, pos);
    let shape = cfg.block_shape();
    let ctx = BlockContext {
        shape: &shape,
        eps: cfg.norm_eps,
        rope_base: None,
    };
    let span = [Span::bidirectional(0, states)];
    for b in &vars.blocks {
        h = block_forward(g, b, &ctx, h, &span, None);
    }
    Ok(g.rms_norm(h, vars.final_norm, cfg.norm_eps))
}

/// Encoder states `[floor(frames / 2) x feat]`.
pub fn encode_clip(cfg: &AudioConfig, weights: &AudioEncoderWeights, mel: &Mat) -> Result<Mat> {
    cfg.validate()?;
    let mut g = Graph::new();
    let vars = AudioEncoderVars::register(&mut g, weights, false);
    let x = g.input(mel.clone());
    let out = encode_clip_graph(&mut g, cfg, &vars, x)?;
    Ok(g.value(out).clone())
}

pub fn project_graph(g: &mut Graph, vars: &AudioProjectorVars, states: Var) -> Var {
    let x = g.matmul(states, vars.w);
    g.add_row(x, vars.b)
}

/// One embedding per encoder state.
pub fn project(states: &Mat, proj: &AudioProjector) -> Result<Mat> {
    if states.rows() == 0 {
        return Err(Error::input("no encoder states to project"));
    }
    if states.cols() != proj.w.rows() {
        return Err(Error::Shape {
            name: "audio states".into(),
            expected: vec![states.rows(), proj.w.rows()],
            found: vec![states.rows(), states.cols()],
        });
    }
    let mut out = crate::tensor::matmul(states, &proj.w);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(proj.b.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Concatenates per-clip token blocks in order.
pub fn concat_clips(blocks: &[Mat]) -> Result<Mat> {
    let Some(first) = blocks.first() else {
        return Ok(Mat::zeros(0, 0));
    };
    if let Some(bad) = blocks.iter().find(|b| b.cols() != first.cols()) {
        return Err(Error::input(format!(
            "clip token widths differ: {} vs {}",
            first.cols(),
            bad.cols()
        )));
    }
    Ok(Mat::concat_rows(&blocks.iter().collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSummary {
    pub start_s: f64,
    pub duration_s: f64,
    pub frames: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTokens {
    pub clips: Vec<ClipSummary>,
    pub embeddings: Mat,
}

impl AudioTokens {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct AudioModel<'a> {
    pub config: &'a AudioConfig,
    pub encoder: &'a AudioEncoderWeights,
    pub projector: &'a AudioProjector,
}

/// Clip log-mel inputs for a waveform, in order. Clips too short to yield
/// a single token are dropped.
pub fn clip_features(cfg: &AudioConfig, samples: &[f32], sample_rate: u32) -> Result<Vec<(ClipSummary, Mat)>> {
    let clips = segment_clips(samples, sample_rate)?;
    let mut out = Vec::with_capacity(clips.len());
    for (i, mut clip) in clips.into_iter().enumerate() {
        let duration_s = clip.duration_s();
        if cfg.pad_clips {
            clip.samples.resize(CLIP_SAMPLES, 0.0);
        }
        let frames = clip.num_frames();
        if frames < 2 {
            continue;
        }
        let mel = mel_spectrogram(&clip)?;
        out.push((
            ClipSummary {
                start_s: (i * CLIP_SECONDS) as f64,
                duration_s,
                frames,
                tokens: frames / 2,
            },
            mel,
        ));
    }
    Ok(out)
}

/// Segment, mel, encode, project and concatenate.
pub fn encode_audio(model: &AudioModel<'_>, samples: &[f32], sample_rate: u32) -> Result<AudioTokens> {
    let feats = clip_features(model.config, samples, sample_rate)?;
    let mut clips = Vec::with_capacity(feats.len());
    let mut blocks = Vec::with_capacity(feats.len());
    for (summary, mel) in feats {
        let states = encode_clip(model.config, model.encoder, &mel)?;
        blocks.push(project(&states, model.projector)?);
        clips.push(summary);
    }
    let embeddings = if blocks.is_empty() {
        Mat::zeros(0, model.projector.out_dim())
    } else {
        concat_clips(&blocks)?
    };
    Ok(AudioTokens { clips, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sine(freq: f64, seconds: f64) -> Vec<f32> {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * 0.5)
            .collect()
    }

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn segmentation_lengths() {
        let d = |s: &[AudioClip]| s.iter().map(|c| c.duration_s()).collect::<Vec<_>>();
        assert_eq!(d(&segment_clips(&vec![0.0; 75 * 16000], 16000).unwrap()), vec![30.0, 30.0, 15.0]);
        assert_eq!(d(&segment_clips(&vec![0.0; 10 * 16000], 16000).unwrap()), vec![10.0]);
        assert_eq!(d(&segment_clips(&vec![0.0; 30 * 16000], 16000).unwrap()), vec![30.0]);
        assert_eq!(d(&segment_clips(&vec![0.0; 44100 * 2], 44100).unwrap()), vec![2.0]);
        assert!(segment_clips(&[], 16000).is_err());
        assert!(segment_clips(&[0.0], 11025).is_err());
    }

    #[test]
    fn linear_resample_interpolates() {
        let up = resample_linear(&[0.0, 1.0, 0.0, -1.0], 8000, 16000).unwrap();
        assert_eq!(up, vec![0.0, 0.5, 1.0, 0.5, 0.0, -0.5, -1.0, -1.0]);
    }

    #[test]
    fn silence_sits_at_floor() {
        let m = mel_spectrogram(&clip(vec![0.0; 16000])).unwrap();
        assert_eq!(m.shape(), (100, N_MELS));
        assert!(m.data().iter().all(|v| *v == -1.5));
    }

    #[test]
    fn thirty_seconds_gives_3000_frames() {
        let m = mel_energies(&clip(vec![0.0; CLIP_SAMPLES])).unwrap();
        assert_eq!(m.rows(), 3000);
    }

    #[test]
    fn sine_peaks_at_nearest_mel_center() {
        let m = mel_spectrogram(&clip(sine(440.0, 1.0))).unwrap();
        let centers = mel_centers(N_MELS, 8000.0);
        let want = (0..N_MELS)
            .min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs()))
            .unwrap();
        for t in 2..m.rows() - 2 {
            assert_eq!(m.argmax_row(t), want, "frame {t}");
        }
    }

    #[test]
    fn doubling_amplitude_quadruples_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.25f32..0.25)).collect();
        let a = mel_energies(&clip(s.clone())).unwrap();
        let b = mel_energies(&clip(s.iter().map(|v| v * 2.0).collect())).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - 4.0 * x).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn filterbank_is_area_normalised() {
        let fb = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE);
        assert_eq!(fb.shape(), (128, 201));
        assert!(fb.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn encoder_halves_frames() {
        let cfg = AudioConfig {
            n_mels: 8,
            feat: 16,
            heads: 2,
            ffn: 24,
            ..Default::default()
        };
        let w = AudioEncoderWeights::init(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for frames in [2, 3, 7, 100] {
            let mel = Mat::randn(frames, 8, 1.0, &mut rng);
            let s = encode_clip(&cfg, &w, &mel).unwrap();
            assert_eq!(s.shape(), (frames / 2, 16));
            assert_eq!(s, encode_clip(&cfg, &w, &mel).unwrap());
        }
        assert!(encode_clip(&cfg, &w, &Mat::zeros(1, 8)).is_err());
    }

    #[test]
    fn zero_projector_returns_bias() {
        let p = AudioProjector {
            w: Arc::new(Mat::zeros(4, 3)),
            b: Arc::new(Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5])),
        };
        let out = project(&Mat::filled(5, 4, 7.0), &p).unwrap();
        for r in 0..5 {
            assert_eq!(out.row(r), &[1.0, -2.0, 0.5]);
        }
        assert!(project(&Mat::zeros(0, 4), &p).is_err());
    }

    #[test]
    fn concat_behaviour() {
        let blocks = [Mat::zeros(1500, 4), Mat::zeros(1500, 4), Mat::zeros(750, 4)];
        assert_eq!(concat_clips(&blocks).unwrap().rows(), 3750);
        let one = Mat::filled(3, 2, 1.5);
        assert_eq!(concat_clips(std::slice::from_ref(&one)).unwrap(), one);
        assert!(concat_clips(&[]).unwrap().is_empty());
        assert!(concat_clips(&[Mat::zeros(2, 3), Mat::zeros(2, 4)]).is_err());
    }

    #[test]
    fn rate_law_budget() {
        for half_secs in 1..=60usize {
            let n = half_secs * 8000;
            assert_eq!(token_budget(n, 16000, false).unwrap(), (n / 160) / 2);
        }
        assert_eq!(token_budget(30 * 16000, 16000, false).unwrap(), 1500);
        assert_eq!(token_budget(75 * 16000, 16000, false).unwrap(), 3750);
        assert_eq!(token_budget(75 * 16000, 16000, true).unwrap(), 4500);
        assert_eq!(token_budget(48000, 48000, false).unwrap(), 50);
    }

    #[test]
    fn wav_round_trip_downmixes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let (s, rate) = load_wav(&path).unwrap();
        assert_eq!(rate, 22050);
        assert_eq!(s, vec![0.25; 10]);
    }
}
