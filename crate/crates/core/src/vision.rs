//! Image path: adaptive slicing, a toy patch encoder, and a single-layer
//! cross-attention resampler that turns any number of patch features into
//! exactly [`QUERY_TOKENS`] LLM embeddings per view.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{block_forward, leaf, BlockContext, BlockShape, BlockVars, BlockWeights, NamedParam, NamedParamMut, Parameters, Span};
use crate::tensor::Mat;

pub const QUERY_TOKENS: usize = 64;
pub const MAX_SLICES: usize = 9;
pub const GLOBAL_SIZE: usize = 448;

/// Pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub image_width: usize,
    pub image_height: usize,
    pub rows: usize,
    pub cols: usize,
    pub include_global: bool,
    /// Row-major slice rectangles; empty when the image is not sliced.
    pub slices: Vec<Rect>,
    pub global_size: (usize, usize),
}

impl SlicePlan {
    pub fn num_views(&self) -> usize {
        self.slices.len() + usize::from(self.include_global)
    }

    pub fn token_count(&self) -> usize {
        QUERY_TOKENS * self.num_views()
    }
}

fn grid_distortion(width: usize, height: usize, rows: usize, cols: usize) -> f64 {
    let slice_w = width as f64 / cols as f64;
    let slice_h = height as f64 / rows as f64;
    (slice_w / slice_h).ln().abs()
}

/// Chooses a slicing grid.
///
/// Images that fit in `base x base` are not sliced. Otherwise the target
/// count is `clamp(round(w*h / base^2), 1, max_slices)`; among grids whose
/// size is within one of the target, the one whose slices are closest to
/// square wins, then fewer slices, then more rows. Grids that would cut a
/// side into more parts than it has pixels are skipped.
pub fn plan_slices(width: usize, height: usize, max_slices: usize, base: usize) -> Result<SlicePlan> {
    if width == 0 || height == 0 {
        return Err(Error::input(format!("image must be non-empty, got {width}x{height}")));
    }
    if max_slices == 0 || base == 0 {
        return Err(Error::config("max_slices and base must be positive"));
    }
    let mut plan = SlicePlan {
        image_width: width,
        image_height: height,
        rows: 0,
        cols: 0,
        include_global: true,
        slices: Vec::new(),
        global_size: (base, base),
    };
    if width <= base && height <= base {
        return Ok(plan);
    }
    let ratio = (width * height) as f64 / (base * base) as f64;
    let target = (ratio.round() as usize).clamp(1, max_slices);
    let mut best: Option<(f64, usize, usize)> = None;
    for n in target.saturating_sub(1).max(1)..=(target + 1).min(max_slices) {
        for rows in 1..=n {
            if n % rows != 0 {
                continue;
            }
            let cols = n / rows;
            if cols > width || rows > height {
                continue;
            }
            let d = grid_distortion(width, height, rows, cols);
            let better = match best {
                None => true,
                Some((bd, br, bc)) => {
                    let bn = br * bc;
                    d < bd || (d == bd && (n < bn || (n == bn && rows > br)))
                }
            };
            if better {
                best = Some((d, rows, cols));
            }
        }
    }
    let (_, rows, cols) = best.expect("a 1x1 or 1x2 grid always fits an image larger than base");
    plan.rows = rows;
    plan.cols = cols;
    for r in 0..rows {
        let y0 = r * height / rows;
        let y1 = (r + 1) * height / rows;
        for c in 0..cols {
            let x0 = c * width / cols;
            let x1 = (c + 1) * width / cols;
            plan.slices.push(Rect {
                x: x0,
                y: y0,
                width: x1 - x0,
                height: y1 - y0,
            });
        }
    }
    Ok(plan)
}

/// RGB image with channel values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::input(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    /// Decodes PNG or JPEG into 8-bit RGB scaled to `[0, 1]`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    /// Reads only the header.
    pub fn dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
        let (w, h) = image::image_dimensions(path)?;
        Ok((w as usize, h as usize))
    }

    #[inline]
    fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Bilinear resample of `rect` to `out_w x out_h` (half-pixel centres).
    pub fn resize_region(&self, rect: Rect, out_w: usize, out_h: usize) -> Image {
        let sx = rect.width as f64 / out_w as f64;
        let sy = rect.height as f64 / out_h as f64;
        let mut data = Vec::with_capacity(out_w * out_h * 3);
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (rect.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(rect.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (rect.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(rect.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let p = |x: usize, y: usize| self.at(rect.x + x, rect.y + y, c) as f64;
                    let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                    let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                    data.push((top * (1.0 - wy) + bottom * wy) as f32);
                }
            }
        }
        Image {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        self.resize_region(
            Rect {
                x: 0,
                y: 0,
                width: self.width,
                height: self.height,
            },
            out_w,
            out_h,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub feat: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub resampler_heads: usize,
    /// Learned 2-D offsets added to the resampler keys.
    pub pos_offsets: bool,
    pub max_grid: usize,
    pub max_slices: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub norm_eps: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: GLOBAL_SIZE,
            patch: 32,
            feat: 64,
            layers: 2,
            heads: 4,
            ffn: 128,
            resampler_heads: 4,
            pos_offsets: true,
            max_grid: 32,
            max_slices: MAX_SLICES,
            mean: [0.5; 3],
            std: [0.5; 3],
            norm_eps: 1e-5,
        }
    }
}

impl VisionConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

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
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::config("image_size must be a positive multiple of patch"));
        }
        if self.heads == 0 || self.feat % self.heads != 0 {
            return Err(Error::config("feat must be divisible by heads"));
        }
        if self.resampler_heads == 0 || self.feat % self.resampler_heads != 0 {
            return Err(Error::config("feat must be divisible by resampler_heads"));
        }
        if self.grid_side() > self.max_grid {
            return Err(Error::config("patch grid exceeds max_grid"));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("normalisation std must be positive"));
        }
        Ok(())
    }
}

/// Patchify + linear projection + learned positions + bidirectional blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderWeights {
    pub patch_proj: Arc<Mat>,
    pub patch_bias: Arc<Mat>,
    pub pos: Arc<Mat>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Arc<Mat>,
}

impl VisionEncoderWeights {
    pub fn init(cfg: &VisionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.block_shape();
        VisionEncoderWeights {
            patch_proj: Arc::new(Mat::randn(cfg.patch_dim(), cfg.feat, 1.0 / (cfg.patch_dim() as f64).sqrt(), &mut rng)),
            patch_bias: Arc::new(Mat::zeros(1, cfg.feat)),
            pos: Arc::new(Mat::randn(cfg.num_patches(), cfg.feat, 0.02, &mut rng)),
            blocks: (0..cfg.layers).map(|_| BlockWeights::init(&shape, &mut rng)).collect(),
            final_norm: Arc::new(Mat::filled(1, cfg.feat, 1.0)),
        }
    }
}

impl Parameters for VisionEncoderWeights {
    fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("patch_bias".to_string(), &self.patch_bias),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("blocks.{i}")));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        let mut out = vec![
            ("patch_proj".to_string(), &mut self.patch_proj),
            ("patch_bias".to_string(), &mut self.patch_bias),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("blocks.{i}")));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }
}

/// Learned queries cross-attending over patch features, projected to the
/// language model width.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerWeights {
    pub queries: Arc<Mat>,
    pub kv_norm: Arc<Mat>,
    pub row_pos: Arc<Mat>,
    pub col_pos: Arc<Mat>,
    pub wq: Arc<Mat>,
    pub wk: Arc<Mat>,
    pub wv: Arc<Mat>,
    pub wo: Arc<Mat>,
    pub bo: Arc<Mat>,
}

impl ResamplerWeights {
    pub fn init(cfg: &VisionConfig, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feat;
        let s = 1.0 / (f as f64).sqrt();
        ResamplerWeights {
            queries: Arc::new(Mat::randn(QUERY_TOKENS, f, 1.0, &mut rng)),
            kv_norm: Arc::new(Mat::filled(1, f, 1.0)),
            row_pos: Arc::new(Mat::randn(cfg.max_grid, f, 0.1, &mut rng)),
            col_pos: Arc::new(Mat::randn(cfg.max_grid, f, 0.1, &mut rng)),
            wq: Arc::new(Mat::randn(f, f, s, &mut rng)),
            wk: Arc::new(Mat::randn(f, f, s, &mut rng)),
            wv: Arc::new(Mat::randn(f, f, s, &mut rng)),
            wo: Arc::new(Mat::randn(f, out_dim, s, &mut rng)),
            bo: Arc::new(Mat::zeros(1, out_dim)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.wo.cols()
    }
}

impl Parameters for ResamplerWeights {
    fn params(&self) -> Vec<NamedParam<'_>> {
        vec![
            ("queries".into(), &self.queries),
            ("kv_norm".into(), &self.kv_norm),
            ("row_pos".into(), &self.row_pos),
            ("col_pos".into(), &self.col_pos),
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
            ("bo".into(), &self.bo),
        ]
    }

    fn params_mut(&mut self) -> Vec<NamedParamMut<'_>> {
        vec![
            ("queries".into(), &mut self.queries),
            ("kv_norm".into(), &mut self.kv_norm),
            ("row_pos".into(), &mut self.row_pos),
            ("col_pos".into(), &mut self.col_pos),
            ("wq".into(), &mut self.wq),
            ("wk".into(), &mut self.wk),
            ("wv".into(), &mut self.wv),
            ("wo".into(), &mut self.wo),
            ("bo".into(), &mut self.bo),
        ]
    }
}

pub struct VisionEncoderVars {
    patch_proj: Var,
    patch_bias: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    final_norm: Var,
}

impl VisionEncoderVars {
    pub fn register(g: &mut Graph, w: &VisionEncoderWeights, trainable: bool) -> Self {
        VisionEncoderVars {
            patch_proj: leaf(g, &w.patch_proj, trainable),
            patch_bias: leaf(g, &w.patch_bias, trainable),
            pos: leaf(g, &w.pos, trainable),
            blocks: w.blocks.iter().map(|b| BlockVars::register(g, b, trainable)).collect(),
            final_norm: leaf(g, &w.final_norm, trainable),
        }
    }

    pub fn handles(&self) -> Vec<Var> {
        let mut out = vec![self.patch_proj, self.patch_bias, self.pos];
        for b in &self.blocks {
            out.extend(b.handles());
        }
        out.push(self.final_norm);
        out
    }
}

pub struct ResamplerVars {
    queries: Var,
    kv_norm: Var,
    row_pos: Var,
    col_pos: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
}

impl ResamplerVars {
    pub fn register(g: &mut Graph, w: &ResamplerWeights, trainable: bool) -> Self {
        ResamplerVars {
            queries: leaf(g, &w.queries, trainable),
            kv_norm: leaf(g, &w.kv_norm, trainable),
            row_pos: leaf(g, &w.row_pos, trainable),
            col_pos: leaf(g, &w.col_pos, trainable),
            wq: leaf(g, &w.wq, trainable),
            wk: leaf(g, &w.wk, trainable),
            wv: leaf(g, &w.wv, trainable),
            wo: leaf(g, &w.wo, trainable),
            bo: leaf(g, &w.bo, trainable),
        }
    }

    pub fn handles(&self) -> Vec<Var> {
        vec![
            self.queries,
            self.kv_norm,
            self.row_pos,
            self.col_pos,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.bo,
        ]
    }
}

/// Normalised, patch-major pixel matrix `[patches x patch*patch*3]` of a
/// view that is already `image_size` square.
pub fn patchify(cfg: &VisionConfig, view: &Image) -> Result<Mat> {
    if view.width != cfg.image_size || view.height != cfg.image_size {
        return Err(Error::input(format!(
            "view is {}x{}, expected {}x{}",
            view.width, view.height, cfg.image_size, cfg.image_size
        )));
    }
    let side = cfg.grid_side();
    let p = cfg.patch;
    let mut out = Mat::zeros(side * side, cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut i = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        let v = view.at(px * p + dx, py * p + dy, c);
                        row[i] = ((v - cfg.mean[c]) / cfg.std[c]) as f64;
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_view_graph(g: &mut Graph, cfg: &VisionConfig, vars: &VisionEncoderVars, patches: Var) -> Var {
    let x = g.matmul(patches, vars.patch_proj);
    let x = g.add_row(x, vars.patch_bias);
    let mut h = g.add(x, vars.pos);
    let shape = cfg.block_shape();
    let ctx = BlockContext {
        shape: &shape,
        eps: cfg.norm_eps,
        rope_base: None,
    };
    let n = g.value(h).rows();
    let span = [Span::bidirectional(0, n)];
    for b in &vars.blocks {
        h = block_forward(g, b, &ctx, h, &span, None);
    }
    g.rms_norm(h, vars.final_norm, cfg.norm_eps)
}

/// Patch features `[patches x feat]` for one `image_size`-square view.
pub fn encode_view(cfg: &VisionConfig, weights: &VisionEncoderWeights, view: &Image) -> Result<Mat> {
    cfg.validate()?;
    let patches = patchify(cfg, view)?;
    let mut g = Graph::new();
    let vars = VisionEncoderVars::register(&mut g, weights, false);
    let x = g.input(patches);
    let out = encode_view_graph(&mut g, cfg, &vars, x);
    Ok(g.value(out).clone())
}

/// Row-major patch grid layout used for the resampler's key offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn square(side: usize) -> Self {
        PatchGrid { rows: side, cols: side }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention probabilities per head plus the output tokens.
pub struct ResampleTrace {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

pub fn resample_graph(
    g: &mut Graph,
    cfg: &VisionConfig,
    vars: &ResamplerVars,
    features: Var,
    grid: PatchGrid,
) -> Result<ResampleTrace> {
    let n = g.value(features).rows();
    if n == 0 {
        return Err(Error::input("resampler needs at least one patch feature"));
    }
    if grid.len() != n {
        return Err(Error::input(format!("grid {}x{} does not hold {n} patches", grid.rows, grid.cols)));
    }
    if g.value(features).cols() != cfg.feat {
        return Err(Error::input(format!(
            "patch features are {} wide, resampler expects {}",
            g.value(features).cols(),
            cfg.feat
        )));
    }
    let kv = g.rms_norm(features, vars.kv_norm, cfg.norm_eps);
    let key_in = if cfg.pos_offsets {
        if grid.rows > cfg.max_grid || grid.cols > cfg.max_grid {
            return Err(Error::input(format!("patch grid exceeds {} per side", cfg.max_grid)));
        }
        let rows = Arc::new((0..n).map(|i| i / grid.cols).collect());
        let cols = Arc::new((0..n).map(|i| i % grid.cols).collect());
        let r = g.gather(vars.row_pos, rows);
        let c = g.gather(vars.col_pos, cols);
        let offs = g.add(r, c);
        g.add(kv, offs)
    } else {
        kv
    };
    let q = g.matmul(vars.queries, vars.wq);
    let k = g.matmul(key_in, vars.wk);
    let v = g.matmul(kv, vars.wv);
    let hd = cfg.feat / cfg.resampler_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.resampler_heads);
    let mut attention = Vec::with_capacity(cfg.resampler_heads);
    for h in 0..cfg.resampler_heads {
        let qh = g.slice_cols(q, h * hd, hd);
        let kh = g.slice_cols(k, h * hd, hd);
        let vh = g.slice_cols(v, h * hd, hd);
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax(s, None);
        attention.push(p);
        heads.push(g.matmul(p, vh));
    }
    let o = g.concat_cols(&heads);
    let o = g.matmul(o, vars.wo);
    let tokens = g.add_row(o, vars.bo);
    Ok(ResampleTrace { tokens, attention })
}

/// Exactly [`QUERY_TOKENS`] embeddings of the resampler's output width.
pub fn resample(cfg: &VisionConfig, weights: &ResamplerWeights, features: &Mat, grid: PatchGrid) -> Result<Mat> {
    let mut g = Graph::new();
    let vars = ResamplerVars::register(&mut g, weights, false);
    let f = g.input(features.clone());
    let trace = resample_graph(&mut g, cfg, &vars, f, grid)?;
    Ok(g.value(trace.tokens).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTokens {
    pub plan: SlicePlan,
    /// One `QUERY_TOKENS x hidden` block per view: slices row-major, then
    /// the global view.
    pub blocks: Vec<Mat>,
}

impl VisionTokens {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Mat::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_mat(&self) -> Mat {
        Mat::concat_rows(&self.blocks.iter().collect::<Vec<_>>())
    }
}

/// Every view of an image, resized to the encoder's square input, in
/// token order.
pub fn image_views(cfg: &VisionConfig, image: &Image) -> Result<(SlicePlan, Vec<Image>)> {
    let plan = plan_slices(image.width, image.height, cfg.max_slices, cfg.image_size)?;
    let s = cfg.image_size;
    let mut views: Vec<Image> = plan.slices.iter().map(|r| image.resize_region(*r, s, s)).collect();
    if plan.include_global {
        views.push(image.resize(plan.global_size.0, plan.global_size.1));
    }
    Ok((plan, views))
}

pub struct VisionModel<'a> {
    pub config: &'a VisionConfig,
    pub encoder: &'a VisionEncoderWeights,
    pub resampler: &'a ResamplerWeights,
}

/// Slices, encodes and resamples every view of an image.
pub fn encode_image(model: &VisionModel<'_>, image: &Image) -> Result<VisionTokens> {
    let cfg = model.config;
    cfg.validate()?;
    let (plan, views) = image_views(cfg, image)?;
    let grid = PatchGrid::square(cfg.grid_side());
    let blocks = views
        .iter()
        .map(|v| {
            let feats = encode_view(cfg, model.encoder, v)?;
            resample(cfg, model.resampler, &feats, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisionTokens { plan, blocks })
}
