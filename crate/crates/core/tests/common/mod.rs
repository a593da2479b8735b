//! Reference implementations written independently of the library, used as
//! oracles by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use omni_core::lm::{LmConfig, LmWeights};
use omni_core::tensor::Mat;
use rand::Rng;

pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// ---- text ---------------------------------------------------------------

/// Random string mixing ASCII, control characters, Latin-1, CJK, emoji and
/// arbitrary scalar values.
pub fn random_text<R: Rng>(rng: &mut R, max_chars: usize) -> String {
    let n = rng.random_range(0..=max_chars);
    (0..n)
        .map(|_| {
            let c = match rng.random_range(0..6) {
                0 => rng.random_range(0x20u32..0x7f),
                1 => rng.random_range(0x00u32..0x20),
                2 => rng.random_range(0xa0u32..0x180),
                3 => rng.random_range(0x4e00u32..0xa000),
                4 => rng.random_range(0x1f300u32..0x1fb00),
                _ => rng.random_range(0u32..0x110000),
            };
            char::from_u32(c).unwrap_or('\u{fffd}')
        })
        .collect()
}

/// Textbook BPE: repeatedly merge every occurrence of the lowest-ranked
/// adjacent pair, left to right.
pub fn naive_bpe(bytes: &[u8], merges: &[(u32, u32)]) -> Vec<u32> {
    let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
    loop {
        let best = ids
            .windows(2)
            .filter_map(|w| merges.iter().position(|&m| m == (w[0], w[1])))
            .min();
        let Some(rank) = best else { return ids };
        let pair = merges[rank];
        let mut out = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                out.push(256 + rank as u32);
                i += 2;
            } else {
                out.push(ids[i]);
                i += 1;
            }
        }
        ids = out;
    }
}

// ---- dedup ----------------------------------------------------------------

pub fn random_words<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..9);
            (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
        })
        .collect()
}

/// Word `width`-grams of lower-case, single-spaced text.
pub fn word_shingles(text: &str, width: usize) -> BTreeSet<String> {
    let words: Vec<&str> = text.split(' ').collect();
    if words.len() <= width {
        return BTreeSet::from([words.join(" ")]);
    }
    (0..=words.len() - width).map(|i| words[i..i + width].join(" ")).collect()
}

pub fn brute_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.iter().filter(|x| b.contains(*x)).count();
    let union = a.len() + b.iter().filter(|x| !a.contains(*x)).count();
    inter as f64 / union as f64
}

// ---- decoder ----------------------------------------------------------------

/// Rotates consecutive pairs of each `head_dim` block by
/// `pos * base^(-2i/head_dim)`.
pub fn rope_oracle(x: &[f64], pos: usize, head_dim: usize, base: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for h in 0..x.len() / head_dim {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (a, b) = (x[h * head_dim + 2 * i], x[h * head_dim + 2 * i + 1]);
            out[h * head_dim + 2 * i] = a * theta.cos() - b * theta.sin();
            out[h * head_dim + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(gain).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.cols())
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
        .collect()
}

/// Row-by-row causal decoder with per-head loops; key/value head `h / group`
/// serves query head `h`.
pub fn lm_oracle(cfg: &LmConfig, w: &LmWeights, ids: &[u32], positions: &[usize]) -> Mat {
    let hd = cfg.hidden / cfg.heads;
    let group = cfg.heads / cfg.kv_heads;
    let n = ids.len();
    let mut x: Vec<Vec<f64>> = ids.iter().map(|&i| w.embed.row(i as usize).to_vec()).collect();
    for layer in &w.layers {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for (t, row) in x.iter().enumerate() {
            let h = rms(row, layer.attn_norm.data(), cfg.norm_eps);
            q.push(rope_oracle(&vecmat(&h, &layer.wq), positions[t], hd, cfg.rope_base));
            k.push(rope_oracle(&vecmat(&h, &layer.wk), positions[t], hd, cfg.rope_base));
            v.push(vecmat(&h, &layer.wv));
        }
        for t in 0..n {
            let mut o = vec![0.0; cfg.heads * hd];
            for head in 0..cfg.heads {
                let kv = head / group;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..hd).map(|d| q[t][head * hd + d] * k[s][kv * hd + d]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, p) in e.iter().enumerate() {
                    for d in 0..hd {
                        o[head * hd + d] += p / z * v[s][kv * hd + d];
                    }
                }
            }
            let attn = vecmat(&o, &layer.wo);
            for (a, b) in x[t].iter_mut().zip(attn) {
                *a += b;
            }
            let h = rms(&x[t], layer.ffn_norm.data(), cfg.norm_eps);
            let gate = vecmat(&h, &layer.w_gate);
            let up = vecmat(&h, &layer.w_up);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = vecmat(&act, &layer.w_down);
            for (a, b) in x[t].iter_mut().zip(down) {
                *a += b;
            }
        }
    }
    let rows: Vec<Vec<f64>> = x
        .iter()
        .map(|r| vecmat(&rms(r, w.final_norm.data(), cfg.norm_eps), &w.head))
        .collect();
    Mat::from_rows(&rows)
}

/// Mean next-token cross entropy over a sequence of logits.
pub fn next_token_ce(logits: &Mat, ids: &[u32]) -> f64 {
    let n = ids.len() - 1;
    let mut total = 0.0;
    for t in 0..n {
        let row = logits.row(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[ids[t + 1] as usize];
    }
    total / n as f64
}

pub fn allocated_params(w: &LmWeights) -> usize {
    let mut n = w.embed.len() + w.final_norm.len() + w.head.len();
    for l in &w.layers {
        n += [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down]
            .iter()
            .map(|m| m.len())
            .sum::<usize>();
    }
    n
}

// ---- vision -----------------------------------------------------------------

/// Exhaustive scan of every grid with `rows * cols <= max_slices`, scored
/// by slice aspect distortion among grids within one of the target count;
/// ties prefer fewer slices, then more rows.
pub fn grid_oracle(w: usize, h: usize, max_slices: usize, base: usize) -> Option<(usize, usize)> {
    if w <= base && h <= base {
        return None;
    }
    let target = (((w * h) as f64 / (base * base) as f64).round() as usize).clamp(1, max_slices);
    let mut all = Vec::new();
    for rows in 1..=max_slices {
        for cols in 1..=max_slices / rows {
            let n = rows * cols;
            if n + 1 < target || n > target + 1 || cols > w || rows > h {
                continue;
            }
            let d = ((w as f64 / cols as f64) / (h as f64 / rows as f64)).ln().abs();
            all.push((d, n, std::cmp::Reverse(rows), cols));
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.first().map(|&(_, _, std::cmp::Reverse(r), c)| (r, c))
}

// ---- audio ------------------------------------------------------------------

fn slaney_mel(f: f64) -> f64 {
    if f < 1000.0 {
        3.0 * f / 200.0
    } else {
        15.0 + 27.0 * (f / 1000.0).ln() / 6.4f64.ln()
    }
}

fn slaney_hz(m: f64) -> f64 {
    if m < 15.0 {
        200.0 * m / 3.0
    } else {
        1000.0 * ((m - 15.0) * 6.4f64.ln() / 27.0).exp()
    }
}

/// Pre-log mel energies via an O(N^2) DFT: 400-sample periodic Hann window,
/// hop 160, centred zero-padded frames, 128 Slaney filters to 8 kHz.
pub fn mel_energies_oracle(samples: &[f32]) -> Vec<Vec<f64>> {
    const N: usize = 400;
    let frames = samples.len() / 160;
    let edges: Vec<f64> = (0..130).map(|i| slaney_hz(slaney_mel(8000.0) * i as f64 / 129.0)).collect();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame: Vec<f64> = (0..N)
            .map(|j| {
                let idx = (t * 160 + j) as isize - 200;
                let s = if idx >= 0 && (idx as usize) < samples.len() { samples[idx as usize] as f64 } else { 0.0 };
                s * (0.5 - 0.5 * (2.0 * PI * j as f64 / N as f64).cos())
            })
            .collect();
        let power: Vec<f64> = (0..=N / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * j % N) as f64 / N as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let row = (0..128)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let f = k as f64 * 16000.0 / N as f64;
                        let tri = if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        };
                        p * tri * 2.0 / (hi - lo)
                    })
                    .sum()
            })
            .collect();
        out.push(row);
    }
    out
}

pub fn log_mel_oracle(energies: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let logs: Vec<Vec<f64>> = energies
        .iter()
        .map(|r| r.iter().map(|e| e.max(1e-10).log10()).collect())
        .collect();
    let top = logs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter()
        .map(|r| r.iter().map(|v| (v.max(top - 8.0) + 4.0) / 4.0).collect())
        .collect()
}
