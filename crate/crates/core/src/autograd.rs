//! A small reverse-mode autodiff tape over [`Mat`] values.
//!
//! Every model in the crate builds its forward pass on a [`Graph`]; inference
//! simply never calls [`Graph::backward`]. Leaves wrap parameters by `Arc`, so
//! registering a weight does not copy it.

use std::sync::Arc;

use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Softmax(Var),
    Rope { x: Var, positions: Arc<Vec<usize>>, head_dim: usize, base: f64 },
    Gather { table: Var, ids: Arc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    CrossEntropy { logits: Var, targets: Arc<Vec<Option<usize>>> },
    Unfold { a: Var, kernel: usize, stride: usize, pad: usize },
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse frequencies for consecutive-pair rotary embedding.
pub(crate) fn rope_inv_freq(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Mat>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: &Arc<Mat>) -> Var {
        self.leaf(Arc::clone(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Arc<Mat>) -> Var {
        self.leaf(value, false)
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Mat> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 1.0, 0.0);
        self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 1.0, 0.0);
        self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), rv.cols(), "add_row width mismatch");
        let cols = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data()[..cols]) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Silu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise RMS normalisation with a learned `1 x n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        let n = xv.cols();
        assert_eq!(gv.shape(), (1, n), "rms_norm gain shape");
        let mut out = Mat::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, eps }, &[x, gain])
    }

    /// Row softmax. Where `mask[i * cols + j]` is false the probability is
    /// forced to zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols, "softmax mask size");
        }
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| allowed(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of every `head_dim`-wide head
    /// by `position * base^(-2i / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: Arc<Vec<usize>>, head_dim: usize, base: f64) -> Var {
        let out = rope_rotate(self.value(x), &positions, head_dim, base, false);
        self.push(
            out,
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            },
            &[x],
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &id in ids.iter() {
            data.extend_from_slice(tv.row(id));
        }
        let out = Mat::from_vec(ids.len(), tv.cols(), data);
        self.push(out, Op::Gather { table, ids }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Mat> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Mat::concat_rows(&mats);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Mat> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Mat::concat_cols(&mats);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        if start == 0 && len == av.rows() {
            return a;
        }
        let out = av.slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        if start == 0 && len == av.cols() {
            return a;
        }
        let out = av.slice_cols(start, len);
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    /// Mean next-token cross-entropy over rows with a target; `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<Option<usize>>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[*t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets },
            &[logits],
        )
    }

    /// 1-D im2col over the row axis: output row `t` holds input rows
    /// `t*stride - pad .. t*stride - pad + kernel` (zero outside), flattened,
    /// for `t < out_len`.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize, out_len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Mat::zeros(out_len, kernel * cols);
        for t in 0..out_len {
            for k in 0..kernel {
                let src = (t * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < rows {
                    out.row_mut(t)[k * cols..(k + 1) * cols].copy_from_slice(av.row(src as usize));
                }
            }
        }
        self.push(
            out,
            Op::Unfold {
                a,
                kernel,
                stride,
                pad,
            },
            &[a],
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dout, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dout: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    // C = A B  -> dA = dC B^T ; C = A B^T -> dA = dC B
                    gemm(dout, false, bv, !trans_b, &mut da, 1.0, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        gemm(dout, true, av, false, &mut db, 1.0, 0.0);
                    } else {
                        gemm(av, true, dout, false, &mut db, 1.0, 0.0);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dout.clone());
                self.accumulate(grads, *b, dout.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dout.clone());
                if self.needs_grad(*row) {
                    let mut dr = Mat::zeros(1, dout.cols());
                    for r in 0..dout.rows() {
                        for (d, g) in dr.data_mut().iter_mut().zip(dout.row(r)) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = dout.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Mat::from_vec(av.rows(), av.cols(), d));
                }
                if self.needs_grad(*b) {
                    let d = dout.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Mat::from_vec(bv.rows(), bv.cols(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dout.scale(*s)),
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = av
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, g)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Mat::from_vec(av.rows(), av.cols(), d));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = av
                    .data()
                    .iter()
                    .zip(dout.data())
                    .map(|(&x, g)| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(grads, *a, Mat::from_vec(av.rows(), av.cols(), d));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols();
                let mut dx = Mat::zeros(xv.rows(), n);
                let mut dg = Mat::zeros(1, n);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let dy = dout.row(r);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += gv.data()[i] * dy[i] * row[i];
                        dg.data_mut()[i] += dy[i] * row[i] * inv;
                    }
                    let k = dot * inv * inv * inv / n as f64;
                    for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = gv.data()[i] * dy[i] * inv - row[i] * k;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let (rows, cols) = p.shape();
                let mut dx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    let (pr, gr) = (p.row(r), dout.row(r));
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = pr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let dx = rope_rotate(dout, positions, *head_dim, *base, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                if self.needs_grad(*table) {
                    let tv = self.value(*table);
                    let mut dt = Mat::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, g) in dt.row_mut(id).iter_mut().zip(dout.row(r)) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.needs_grad(*p) {
                        self.accumulate(grads, *p, dout.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    if self.needs_grad(*p) {
                        self.accumulate(grads, *p, dout.slice_cols(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows(), av.cols());
                let w = av.cols();
                da.data_mut()[start * w..start * w + dout.len()].copy_from_slice(dout.data());
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    da.row_mut(r)[*start..start + dout.cols()].copy_from_slice(dout.row(r));
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut dl = Mat::zeros(lv.rows(), lv.cols());
                if count > 0 {
                    let scale = dout.data()[0] / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (c, o) in dl.row_mut(r).iter_mut().enumerate() {
                            let p = (row[c] - max).exp() / sum;
                            *o = scale * (p - if c == *t { 1.0 } else { 0.0 });
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Unfold {
                a,
                kernel,
                stride,
                pad,
            } => {
                let av = self.value(*a);
                let (rows, cols) = av.shape();
                let mut da = Mat::zeros(rows, cols);
                for t in 0..dout.rows() {
                    for k in 0..*kernel {
                        let src = (t * stride + k) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < rows {
                            let g = &dout.row(t)[k * cols..(k + 1) * cols];
                            for (d, v) in da.row_mut(src as usize).iter_mut().zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}

fn rope_rotate(x: &Mat, positions: &[usize], head_dim: usize, base: f64, inverse: bool) -> Mat {
    assert_eq!(positions.len(), x.rows(), "one position per row");
    assert!(head_dim % 2 == 0 && x.cols() % head_dim == 0);
    let inv_freq = rope_inv_freq(head_dim, base);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let trig: Vec<(f64, f64)> = inv_freq
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (c, sign * s)
            })
            .collect();
        let row = out.row_mut(r);
        for head in row.chunks_exact_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&trig) {
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every op against the tape.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let shared: Vec<Arc<Mat>> = inputs.into_iter().map(Arc::new).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = shared.iter().map(|m| g.param(m)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);

        let eval = |mats: &[Arc<Mat>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = mats.iter().map(|m| g.constant(Arc::clone(m))).collect();
            let o = build(&mut g, &vs);
            g.value(o).data()[0]
        };
        let h = 1e-5;
        for (i, m) in shared.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            for j in 0..m.len() {
                let mut plus = shared.clone();
                let mut pm = (**m).clone();
                pm.data_mut()[j] += h;
                plus[i] = Arc::new(pm);
                let mut minus = shared.clone();
                let mut mm = (**m).clone();
                mm.data_mut()[j] -= h;
                minus[i] = Arc::new(mm);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {i} coord {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::randn(r, c, 1.0, rng)
    }

    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let bt = rand_mat(&mut rng, 5, 4);
        let row = rand_mat(&mut rng, 1, 4);
        let targets = Arc::new(vec![Some(1), None, Some(0)]);

        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.matmul(v[0], v[1]);
            g.cross_entropy(m, targets.clone())
        });
        check(vec![a.clone(), bt.clone()], |g, v| {
            let m = g.matmul_nt(v[0], v[1]);
            let s = g.softmax(m, None);
            let w = g.slice_cols(s, 0, 2);
            g.cross_entropy(w, targets.clone())
        });
        check(vec![a.clone(), row.clone()], |g, v| {
            let n = g.rms_norm(v[0], v[1], 1e-5);
            let s = g.silu(n);
            let ge = g.gelu(s);
            let m = g.mul(ge, v[0]);
            let r = g.add_row(m, v[1]);
            g.cross_entropy(r, targets.clone())
        });
        let mask = Arc::new(vec![
            true, false, false, false, true, true, false, false, true, true, true, false,
        ]);
        check(vec![a.clone()], |g, v| {
            let s = g.softmax(v[0], Some(mask.clone()));
            let t = g.scale(s, 3.0);
            let u = g.add(t, v[0]);
            g.cross_entropy(u, targets.clone())
        });
        check(vec![a.clone()], |g, v| {
            let r = g.rope(v[0], Arc::new(vec![0, 3, 11]), 2, 10.0);
            g.cross_entropy(r, targets.clone())
        });
        check(vec![a.clone(), b.transpose()], |g, v| {
            let ids = Arc::new(vec![1, 0, 1]);
            let e = g.gather(v[1], ids);
            let top = g.slice_rows(v[0], 0, 2);
            let bottom = g.slice_rows(v[0], 2, 1);
            let c = g.concat_rows(&[bottom, top]);
            let l = g.slice_cols(c, 0, 1);
            let r = g.slice_cols(c, 1, 3);
            let c2 = g.concat_cols(&[r, l]);
            let s = g.add(c2, e);
            g.cross_entropy(s, targets.clone())
        });
        check(vec![rand_mat(&mut rng, 5, 2), rand_mat(&mut rng, 6, 3)], |g, v| {
            let u = g.unfold(v[0], 3, 2, 1, 2);
            let m = g.matmul(u, v[1]);
            g.cross_entropy(m, Arc::new(vec![Some(2), Some(0)]))
        });
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]));
        let mask = Arc::new(vec![true, true, false, true, false, false]);
        let p = g.softmax(x, Some(mask));
        let pv = g.value(p);
        assert!((pv.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pv.get(0, 2), 0.0);
        assert_eq!(pv.row(1), &[1.0, 0.0, 0.0]);
    }
}
