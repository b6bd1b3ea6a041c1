//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs
//! needed by its backward rule. Nodes are only ever appended, so the node
//! list is already in topological order and [`Tape::backward`] walks it once
//! in reverse. A leaf that is used several times (a shared layer, say)
//! simply collects the sum of all contributions.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait BackwardRule: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddColBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    MeanCols(Var),
    Sum(Var),
    Gather { src: Var, index: Vec<Option<usize>> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    BandScores { q: Var, k: Var, radius: usize },
    BandApply { attn: Var, v: Var, radius: usize },
    CrossEntropy { logits: Var, label: usize },
    Custom { inputs: Vec<Var>, rule: Arc<dyn BackwardRule> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer of `var`, `None` when the node does not require grad.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` as a tensor; zero for leaves the loss never reached.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::from_parts(shape.clone(), vec![0.0; shape.iter().product()]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stochastic: bool,
    score_elements: usize,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// True once a training-mode dropout with nonzero rate has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    /// Attention score elements materialized on this tape so far.
    pub fn score_elements(&self) -> usize {
        self.score_elements
    }

    pub(crate) fn meter_scores(&mut self, n: usize) {
        self.score_elements += n;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Element-wise product with a constant buffer of the same size.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.len() {
            return Err(Error::dim(format!("mul_const: {} factors for {} elements", factors.len(), t.len())));
        }
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().zip(&factors).map(|(x, f)| x * f).collect(),
        );
        Ok(self.push(out, Op::MulConst(a, factors), &[a]))
    }

    /// `x[d×L] + b[d]`, the bias broadcast across columns.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.len() != rows {
            return Err(Error::dim(format!("bias of {} entries for {rows} rows", bias.len())));
        }
        let mut data = self.value(x).data().to_vec();
        for (r, chunk) in data.chunks_mut(cols).enumerate() {
            let bv = bias.data()[r];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::AddColBias(x, b), &[x, b]))
    }

    /// `x[C×H×W] + b[C]`, one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 || self.value(b).len() != shape[0] {
            return Err(Error::dim(format!(
                "channel bias of {} entries for input {shape:?}",
                self.value(b).len()
            )));
        }
        let plane = shape[1] * shape[2];
        let mut data = self.value(x).data().to_vec();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = self.value(b).data()[c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect());
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows needs at least one input"));
        };
        let (_, cols) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} columns, expected {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean over columns: `[d×L] → [d×1]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let data = self.value(a).data().chunks(cols).map(|r| r.iter().sum::<f64>() / cols as f64).collect();
        Ok(self.push(Tensor::from_parts(vec![rows, 1], data), Op::MeanCols(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `out[k] = src[index[k]]`, or zero where the index is `None`.
    pub fn gather(&mut self, src: Var, shape: &[usize], index: Vec<Option<usize>>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if index.len() != n {
            return Err(Error::dim(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        let s = self.value(src).data();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= s.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range for {} elements", s.len())));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| s[i])).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { src, index }, &[src]))
    }

    /// Per-column layer normalization of `x[d×L]` with `gamma[d]`, `beta[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (d, cols) = self.value(x).dims2()?;
        if d < 2 {
            return Err(Error::dim(format!("layer_norm needs at least 2 features, got {d}")));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm gamma/beta must have one entry per feature"));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d * cols];
        let mut inv_std = vec![0.0; cols];
        let mut out = vec![0.0; d * cols];
        for t in 0..cols {
            let mean = (0..d).map(|r| xs[r * cols + t]).sum::<f64>() / d as f64;
            let var = (0..d).map(|r| (xs[r * cols + t] - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[t] = is;
            for r in 0..d {
                let h = (xs[r * cols + t] - mean) * is;
                xhat[r * cols + t] = h;
                out[r * cols + t] = g[r] * h + b[r];
            }
        }
        let out = Tensor::from_parts(vec![d, cols], out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Softmax along the last axis. Masked entries (`false`) get weight 0.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = crate::ops::softmax_masked(self.value(logits), mask)?;
        Ok(self.push(out, Op::Softmax(logits), &[logits]))
    }

    /// Same-padded convolution of `input[C_in×H×W]` with `kernel[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let geom = crate::ops::conv_geometry(self.value(input), self.value(kernel), stride)?;
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let out = Tensor::from_parts(vec![geom.c_out, geom.out_h, geom.out_w], data);
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Banded attention scores: `out[i][c] = q_i · k_j` with `j = i + c − radius`,
    /// zero where `j` falls outside the sequence. `q`, `k` are `[d×L]`.
    pub fn band_scores(&mut self, q: Var, k: Var, radius: usize) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        same_shape(tq, tk, "band_scores")?;
        let (d, len) = tq.dims2()?;
        let w = 2 * radius + 1;
        let qt = kernels::transpose(tq.data(), d, len);
        let kt = kernels::transpose(tk.data(), d, len);
        let mut out = vec![0.0; len * w];
        for i in 0..len {
            for c in 0..w {
                if let Some(j) = band_key(i, c, radius, len) {
                    out[i * w + c] = kernels::dot(&qt[i * d..(i + 1) * d], &kt[j * d..(j + 1) * d]);
                }
            }
        }
        let out = Tensor::from_parts(vec![len, w], out);
        Ok(self.push(out, Op::BandScores { q, k, radius }, &[q, k]))
    }

    /// Applies banded weights `attn[L×w]` to values `v[d×L]`.
    pub fn band_apply(&mut self, attn: Var, v: Var, radius: usize) -> Result<Var> {
        let (len, w) = self.value(attn).dims2()?;
        let (d, len_v) = self.value(v).dims2()?;
        if w != 2 * radius + 1 || len != len_v {
            return Err(Error::dim(format!(
                "band_apply: weights {:?} do not fit values {:?} with radius {radius}",
                self.value(attn).shape(),
                self.value(v).shape()
            )));
        }
        let a = self.value(attn).data();
        let vt = kernels::transpose(self.value(v).data(), d, len);
        let mut out_t = vec![0.0; len * d];
        for i in 0..len {
            for c in 0..w {
                if let Some(j) = band_key(i, c, radius, len) {
                    let aw = a[i * w + c];
                    let dst = &mut out_t[i * d..(i + 1) * d];
                    for (o, x) in dst.iter_mut().zip(&vt[j * d..(j + 1) * d]) {
                        *o += aw * x;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![d, len], kernels::transpose(&out_t, len, d));
        Ok(self.push(out, Op::BandApply { attn, v, radius }, &[attn, v]))
    }

    /// `−log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = crate::ops::cross_entropy(self.value(logits).data(), label)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by `1/(1−rate)`.
    /// Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let mask = crate::ops::dropout_mask(self.value(x).len(), rate, rng);
        self.mul_const(x, mask)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Arc<dyn BackwardRule>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let (_, nn) = self.value(*b).dims2().expect("2-D");
                let bv = self.value(*b).data().to_vec();
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, &bv, da, m, nn, k);
                }
                let av = self.value(*a).data();
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av, g, db, k, m, nn);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("2-D");
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, &kernels::transpose(g, c, r));
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(&bv) {
                        *d += x * y;
                    }
                }
                let av = self.value(*a).data().to_vec();
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(&av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(f) {
                        *d += x * y;
                    }
                }
            }
            Op::AddColBias(x, b) => {
                let cols = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (r, chunk) in g.chunks(cols).enumerate() {
                        db[r] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                let plane = node.value.shape()[1] * node.value.shape()[2];
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        db[c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data().to_vec();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(&av) {
                        if *v > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(dp) = self.slot(grads, *p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MeanCols(a) => {
                let (_, cols) = self.value(*a).dims2().expect("2-D");
                if let Some(da) = self.slot(grads, *a) {
                    for (r, chunk) in da.chunks_mut(cols).enumerate() {
                        let share = g[r] / cols as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gather { src, index } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for (k, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            ds[*i] += g[k];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (d, cols) = node.value.dims2().expect("2-D");
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..d {
                        dg[r] += (0..cols).map(|t| g[r * cols + t] * xhat[r * cols + t]).sum::<f64>();
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for (r, chunk) in g.chunks(cols).enumerate() {
                        db[r] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for t in 0..cols {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..d {
                            let dh = g[r * cols + t] * gam[r];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + t];
                        }
                        let scale = inv_std[t] / d as f64;
                        for r in 0..d {
                            let dh = g[r * cols + t] * gam[r];
                            dx[r * cols + t] += scale * (d as f64 * dh - sum_dh - xhat[r * cols + t] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("non-scalar");
                if let Some(da) = self.slot(grads, *a) {
                    for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s = kernels::dot(yr, gr);
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - s);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let want_in = self.nodes[input.0].requires_grad;
                let want_k = self.nodes[kernel.0].requires_grad;
                let (d_in, d_k) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    want_in,
                    want_k,
                );
                if let Some(di) = self.slot(grads, *input) {
                    add_into(di, &d_in);
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    add_into(dk, &d_k);
                }
            }
            Op::BandScores { q, k, radius } => {
                let (d, len) = self.value(*q).dims2().expect("2-D");
                let w = 2 * radius + 1;
                let qt = kernels::transpose(self.value(*q).data(), d, len);
                let kt = kernels::transpose(self.value(*k).data(), d, len);
                let mut dqt = vec![0.0; len * d];
                let mut dkt = vec![0.0; len * d];
                for i in 0..len {
                    for c in 0..w {
                        let Some(j) = band_key(i, c, *radius, len) else { continue };
                        let gi = g[i * w + c];
                        for e in 0..d {
                            dqt[i * d + e] += gi * kt[j * d + e];
                            dkt[j * d + e] += gi * qt[i * d + e];
                        }
                    }
                }
                if let Some(dq) = self.slot(grads, *q) {
                    add_into(dq, &kernels::transpose(&dqt, len, d));
                }
                if let Some(dk) = self.slot(grads, *k) {
                    add_into(dk, &kernels::transpose(&dkt, len, d));
                }
            }
            Op::BandApply { attn, v, radius } => {
                let (len, w) = self.value(*attn).dims2().expect("2-D");
                let (d, _) = self.value(*v).dims2().expect("2-D");
                let a = self.value(*attn).data();
                let vt = kernels::transpose(self.value(*v).data(), d, len);
                let gt = kernels::transpose(g, d, len);
                let mut da = vec![0.0; len * w];
                let mut dvt = vec![0.0; len * d];
                for i in 0..len {
                    for c in 0..w {
                        let Some(j) = band_key(i, c, *radius, len) else { continue };
                        let gi = &gt[i * d..(i + 1) * d];
                        da[i * w + c] = kernels::dot(gi, &vt[j * d..(j + 1) * d]);
                        let aw = a[i * w + c];
                        for e in 0..d {
                            dvt[j * d + e] += aw * gi[e];
                        }
                    }
                }
                if let Some(d_attn) = self.slot(grads, *attn) {
                    add_into(d_attn, &da);
                }
                if let Some(dv) = self.slot(grads, *v) {
                    add_into(dv, &kernels::transpose(&dvt, len, d));
                }
            }
            Op::CrossEntropy { logits, label } => {
                let probs = crate::ops::softmax_vec(self.value(*logits).data());
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, (d, p)) in dl.iter_mut().zip(&probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - target);
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let parts = rule.backward(&ins, &node.value, g);
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(dv) = self.slot(grads, *v) {
                        add_into(dv, &part);
                    }
                }
            }
        }
    }
}

/// Key index for band column `c` of query `i`, if inside `[0, len)`.
#[inline]
pub(crate) fn band_key(i: usize, c: usize, radius: usize, len: usize) -> Option<usize> {
    (i + c).checked_sub(radius).filter(|&j| j < len)
}
