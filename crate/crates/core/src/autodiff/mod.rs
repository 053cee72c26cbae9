//! Tape-based reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a parameter. Graphs built with
//! [`Graph::no_grad`] keep values only.

pub mod kernels;
mod optim;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};

use crate::mask::AttentionMask;

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("constant fits the float type")
}

/// Lower clamp of probabilities inside the BCE terms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("row {row} of the attention mask has no visible entry")]
    EmptyRow { row: usize },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("index {index} out of range for {op} over {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("loss mask selects no entries")]
    EmptySelection,
}

type Result<T> = core::result::Result<T, AutodiffError>;

/// Dense 2-D tensor; scalars are `1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch { op: "from_vec", lhs: (rows, cols), rhs: (data.len(), 1) });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(x: T) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaskedSoftmax(Var),
    Bce { p: Var, y: Vec<T>, m: Vec<bool> },
    SigmoidBce { z: Var, y: Vec<T>, m: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Rope { x: Var, positions: Vec<u32>, head_dim: usize, base: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), track: true }
    }

    /// A graph that records values only; `backward` is a no-op on it.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), track: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: self.track });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    fn mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, lhs, rhs }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, k), (k2, cc)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Self::mismatch("matmul", (r, k), (k2, cc)));
        }
        let mut out = Tensor::zeros(r, cc);
        kernels::mm(&self.value(a).data, &self.value(b).data, &mut out.data, r, k, cc);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, k), (cc, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Self::mismatch("matmul_nt", (r, k), (cc, k2)));
        }
        let mut out = Tensor::zeros(r, cc);
        kernels::mm_nt(&self.value(a).data, &self.value(b).data, &mut out.data, r, k, cc);
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, cc) = x.shape();
        let mut out = Tensor::zeros(cc, r);
        for i in 0..r {
            for j in 0..cc {
                out.data[j * r + i] = x.data[i * cc + j];
            }
        }
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data.iter_mut().zip(&self.value(b).data) {
            *o = *o + y;
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &y) in out.data.iter_mut().zip(&self.value(b).data) {
            *o = *o * y;
        }
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 × c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let ((r, cc), bs) = (self.shape(x), self.shape(b));
        if bs != (1, cc) {
            return Err(Self::mismatch("add_row", (r, cc), bs));
        }
        let mut out = self.value(x).clone();
        let bias = &self.nodes[b.0].value.data;
        for row in out.data.chunks_mut(cc.max(1)) {
            for (o, &y) in row.iter_mut().zip(bias) {
                *o = *o + y;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut total = 0;
        for &p in parts {
            if self.shape(p).0 != r {
                return Err(Self::mismatch("concat_cols", (r, total), self.shape(p)));
            }
            total += self.shape(p).1;
        }
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for i in 0..r {
                out.data[i * total + off..i * total + off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, cc) = self.shape(x);
        if start > end || end > cc {
            return Err(Self::mismatch("slice_cols", (r, cc), (start, end)));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Tensor::zeros(r, w);
        for i in 0..r {
            out.data[i * w..(i + 1) * w].copy_from_slice(&v.row(i)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Rows of `x` at `idx` (repeats allowed): embedding lookup and row selection.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, cc) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: bad, len: r });
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(idx.len(), cc);
        for (o, &i) in idx.iter().enumerate() {
            out.data[o * cc..(o + 1) * cc].copy_from_slice(v.row(i));
        }
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_fwd(v));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Per-row normalization followed by `gain ⊙ x̂ + bias` (`1 × c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, cc) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, cc) {
                return Err(Self::mismatch("layer_norm", (r, cc), self.shape(p)));
            }
        }
        let n = T::from(cc).unwrap();
        let v = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut xhat = vec![T::zero(); r * cc];
        let mut rstd = vec![T::zero(); r];
        let mut out = Tensor::zeros(r, cc);
        for i in 0..r {
            let row = v.row(i);
            let mean = row.iter().fold(T::zero(), |a, &y| a + y) / n;
            let var = row.iter().fold(T::zero(), |a, &y| a + (y - mean) * (y - mean)) / n;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[i] = rs;
            for j in 0..cc {
                let h = (row[j] - mean) * rs;
                xhat[i * cc + j] = h;
                out.data[i * cc + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row-wise softmax over the entries `mask` marks visible; every other
    /// entry is exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, cc) = self.shape(x);
        if mask.n() != r || mask.n() != cc {
            return Err(Self::mismatch("masked_softmax", (r, cc), (mask.n(), mask.n())));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(r, cc);
        for i in 0..r {
            let vis = mask.row(i);
            let row = v.row(i);
            let mut max = T::neg_infinity();
            for j in 0..cc {
                if vis[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == T::neg_infinity() {
                return Err(AutodiffError::EmptyRow { row: i });
            }
            let o = &mut out.data[i * cc..(i + 1) * cc];
            let mut sum = T::zero();
            for j in 0..cc {
                if vis[j] {
                    o[j] = (row[j] - max).exp();
                    sum = sum + o[j];
                }
            }
            for oj in o.iter_mut() {
                *oj = *oj / sum;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    /// Mean binary cross-entropy over the entries selected by `m`, with `p`
    /// clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn bce(&mut self, p: Var, y: &[T], m: &[bool]) -> Result<Var> {
        let loss = bce_value(&self.value(p).data, y, m)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, y: y.to_vec(), m: m.to_vec() }, &[p]))
    }

    /// `bce(sigmoid(z), y, m)` in one node; the backward pass uses the
    /// unclamped `σ(z) − y`.
    pub fn sigmoid_bce(&mut self, z: Var, y: &[T], m: &[bool]) -> Result<Var> {
        let p: Vec<T> = self.value(z).data.iter().map(|&v| sigmoid(v)).collect();
        let loss = bce_value(&p, y, m)?;
        Ok(self.push(Tensor::scalar(loss), Op::SigmoidBce { z, y: y.to_vec(), m: m.to_vec() }, &[z]))
    }

    /// Mean over rows of `−log softmax(logits_r)[target_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.shape(logits);
        if targets.len() != r {
            return Err(Self::mismatch("cross_entropy", (r, v), (targets.len(), 1)));
        }
        if r == 0 {
            return Err(AutodiffError::EmptySelection);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: bad, len: v });
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum = sum + e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p = *p / sum;
            }
            total = total + (sum.ln() + max - row[targets[i]]);
        }
        let loss = total / T::from(r).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().fold(T::zero(), |a, &b| a + b) / T::from(v.data.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Rotary position embedding applied independently to each `head_dim`
    /// block of columns, pairing column `2i` with `2i + 1`.
    pub fn rope(&mut self, x: Var, positions: &[u32], head_dim: usize, base: f64) -> Result<Var> {
        let (r, cc) = self.shape(x);
        if positions.len() != r || head_dim == 0 || head_dim % 2 != 0 || cc % head_dim != 0 {
            return Err(Self::mismatch("rope", (r, cc), (positions.len(), head_dim)));
        }
        let mut out = self.value(x).clone();
        rope_apply(&mut out.data, cc, positions, head_dim, base, false);
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), head_dim, base }, &[x]))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((r, k), (_, cc)) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    kernels::mm_nt(gd, &nodes[b.0].value.data, ga, r, cc, k);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    kernels::mm_tn(&nodes[a.0].value.data, gd, gb, r, k, cc);
                }
            }
            Op::MatMulNT(a, b) => {
                let ((r, k), (cc, _)) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    kernels::mm(gd, &nodes[b.0].value.data, ga, r, cc, k);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    kernels::mm_tn(gd, &nodes[a.0].value.data, gb, r, cc, k);
                }
            }
            Op::Transpose(a) => {
                let (r, cc) = nodes[a.0].value.shape();
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..cc {
                            ga[i * cc + j] = ga[i * cc + j] + gd[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = grad_slot(grads, nodes, *p) {
                        kernels::axpy(T::one(), gd, gp);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(gd).zip(&nodes[b.0].value.data) {
                        *o = *o + gi * bv;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for ((o, &gi), &av) in gb.iter_mut().zip(gd).zip(&nodes[a.0].value.data) {
                        *o = *o + gi * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let cc = nodes[x.0].value.cols;
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    kernels::axpy(T::one(), gd, gx);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for row in gd.chunks(cc.max(1)) {
                        kernels::axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    kernels::axpy(*s, gd, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols;
                let mut off = 0;
                for p in parts {
                    let (r, w) = nodes[p.0].value.shape();
                    if let Some(gp) = grad_slot(grads, nodes, *p) {
                        for i in 0..r {
                            kernels::axpy(T::one(), &gd[i * total + off..i * total + off + w], &mut gp[i * w..(i + 1) * w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let cc = nodes[x.0].value.cols;
                let w = g.cols;
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for i in 0..g.rows {
                        kernels::axpy(T::one(), &gd[i * w..(i + 1) * w], &mut gx[i * cc + start..i * cc + start + w]);
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let cc = nodes[x.0].value.cols;
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        kernels::axpy(T::one(), &gd[o * cc..(o + 1) * cc], &mut gx[i * cc..(i + 1) * cc]);
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((o, &gi), &xv) in gx.iter_mut().zip(gd).zip(&nodes[x.0].value.data) {
                        *o = *o + gi * gelu_grad(xv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((o, &gi), &xv) in gx.iter_mut().zip(gd).zip(&nodes[x.0].value.data) {
                        if xv > T::zero() {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((o, &gi), &y) in gx.iter_mut().zip(gd).zip(&node.value.data) {
                        *o = *o + gi * y * (T::one() - y);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, cc) = node.value.shape();
                let gvals = &nodes[gain.0].value.data;
                if let Some(gg) = grad_slot(grads, nodes, *gain) {
                    for i in 0..r {
                        for j in 0..cc {
                            gg[j] = gg[j] + gd[i * cc + j] * xhat[i * cc + j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *bias) {
                    for row in gd.chunks(cc.max(1)) {
                        kernels::axpy(T::one(), row, gb);
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let n = T::from(cc).unwrap();
                    for i in 0..r {
                        let xh = &xhat[i * cc..(i + 1) * cc];
                        let gr = &gd[i * cc..(i + 1) * cc];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cc {
                            let d = gr[j] * gvals[j];
                            m1 = m1 + d;
                            m2 = m2 + d * xh[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..cc {
                            let d = gr[j] * gvals[j];
                            gx[i * cc + j] = gx[i * cc + j] + rstd[i] * (d - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let (r, cc) = node.value.shape();
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for i in 0..r {
                        let y = node.value.row(i);
                        let gr = &gd[i * cc..(i + 1) * cc];
                        let s = kernels::dot(y, gr);
                        for j in 0..cc {
                            if y[j] != T::zero() {
                                gx[i * cc + j] = gx[i * cc + j] + y[j] * (gr[j] - s);
                            }
                        }
                    }
                }
            }
            Op::Bce { p, y, m } => {
                let count = T::from(m.iter().filter(|&&b| b).count()).unwrap();
                let (lo, hi) = (c::<T>(PROB_EPS), T::one() - c(PROB_EPS));
                if let Some(gp) = grad_slot(grads, nodes, *p) {
                    for (i, &pv) in nodes[p.0].value.data.iter().enumerate() {
                        if m[i] && pv > lo && pv < hi {
                            gp[i] = gp[i] + gd[0] * (pv - y[i]) / (pv * (T::one() - pv)) / count;
                        }
                    }
                }
            }
            Op::SigmoidBce { z, y, m } => {
                let count = T::from(m.iter().filter(|&&b| b).count()).unwrap();
                if let Some(gz) = grad_slot(grads, nodes, *z) {
                    for (i, &zv) in nodes[z.0].value.data.iter().enumerate() {
                        if m[i] {
                            gz[i] = gz[i] + gd[0] * (sigmoid(zv) - y[i]) / count;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].value.cols;
                let scale = gd[0] / T::from(targets.len()).unwrap();
                if let Some(gl) = grad_slot(grads, nodes, *logits) {
                    kernels::axpy(scale, probs, gl);
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * v + t] = gl[i * v + t] - scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + gd[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let s = gd[0] / T::from(gx.len().max(1)).unwrap();
                    for o in gx.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::Rope { x, positions, head_dim, base } => {
                let cc = node.value.cols;
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let mut back = gd.clone();
                    rope_apply(&mut back, cc, positions, *head_dim, *base, true);
                    kernels::axpy(T::one(), &back, gx);
                }
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let (r, cc) = node.value.shape();
    Some(&mut grads[v.0].get_or_insert_with(|| Tensor::zeros(r, cc)).data)
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Float>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Mean clamped BCE over the selected entries.
pub fn bce_value<T: Scalar>(p: &[T], y: &[T], m: &[bool]) -> Result<T> {
    if p.len() != y.len() || p.len() != m.len() {
        return Err(AutodiffError::ShapeMismatch { op: "bce", lhs: (p.len(), 1), rhs: (y.len(), m.len()) });
    }
    let (lo, hi) = (c::<T>(PROB_EPS), T::one() - c(PROB_EPS));
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..p.len() {
        if m[i] {
            let pc = p[i].max(lo).min(hi);
            total = total - (y[i] * pc.ln() + (T::one() - y[i]) * (T::one() - pc).ln());
            count += 1;
        }
    }
    if count == 0 {
        return Err(AutodiffError::EmptySelection);
    }
    Ok(total / T::from(count).unwrap())
}

fn rope_apply<T: Float>(data: &mut [T], cols: usize, positions: &[u32], head_dim: usize, base: f64, inverse: bool) {
    let half = head_dim / 2;
    for (i, &pos) in positions.iter().enumerate() {
        let row = &mut data[i * cols..(i + 1) * cols];
        for k in 0..half {
            let theta = pos as f64 * Float::powf(base, -2.0 * k as f64 / head_dim as f64);
            let (s, co) = Float::sin_cos(theta);
            let s = if inverse { -s } else { s };
            let (s, co): (T, T) = (c(s), c(co));
            for h in 0..cols / head_dim {
                let a = h * head_dim + 2 * k;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * co - x1 * s;
                row[a + 1] = x0 * s + x1 * co;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, cc: usize, d: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(r, cc, d.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0f64));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), g.value(a));
        let v = g.constant(t(3, 1, &[1.0, 2.0, 3.0]));
        assert!(matches!(g.matmul(a, v), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn bce_and_ce_values() {
        let mut g = Graph::new();
        let p = g.constant(t(1, 1, &[0.5]));
        let l = g.bce(p, &[1.0], &[true]).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
        let z = g.constant(Tensor::zeros(1, 10));
        let ce = g.cross_entropy(z, &[3]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
        let p = g.constant(t(1, 1, &[1.0 - 1e-7]));
        let l = g.bce(p, &[1.0], &[true]).unwrap();
        assert!((g.value(l).item() - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_visible() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 2, &[5.0, -1.0, 2.0, 2.0]));
        let m = crate::mask::build_causal_mask(2);
        let s = g.masked_softmax(x, &m).unwrap();
        assert_eq!(g.value(s).data, [1.0, 0.0, 0.5, 0.5]);
        let empty = AttentionMask::new(2);
        assert_eq!(g.masked_softmax(x, &empty), Err(AutodiffError::EmptyRow { row: 0 }));
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0f64));
        let b = g.param(Tensor::scalar(5.0f64));
        let l = g.scale(a, 3.0);
        g.backward(l).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad(a).unwrap().item(), 3.0);
    }

    #[test]
    fn no_grad_graph_is_inert() {
        let mut g = Graph::<f32>::no_grad();
        let a = g.param(Tensor::scalar(2.0));
        let l = g.mul(a, a).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
    }
}
