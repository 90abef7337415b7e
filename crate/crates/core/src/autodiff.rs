//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so node indices are already
//! a topological order and the backward pass is a single reverse sweep.
//! Parameter leaves borrow their tensors; everything else is owned by the tape.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Shape metadata for the fused multi-head attention op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    /// Independent sequences stacked along rows (batch × channels).
    pub groups: usize,
    /// Tokens per sequence.
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn map_len(&self) -> usize {
        self.tokens * self.tokens
    }
}

/// Additive post-softmax bias, `Â = A + λH`, held constant by the tape.
#[derive(Clone, Debug)]
pub struct AttentionBias<S> {
    pub matrix: Tensor<S>,
    pub lambda: S,
    /// Divide each row of `Â` by its sum after adding the bias.
    pub renormalize: bool,
}

/// Attention probabilities kept by the tape for one fused attention op.
///
/// Maps are stored `[group][head][query][key]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord<S> {
    pub shape: AttentionShape,
    pub probs: Vec<S>,
    /// `Some` only when a bias was applied.
    pub biased: Option<Vec<S>>,
}

impl<S: Scalar> AttentionRecord<S> {
    pub fn map(&self, group: usize, head: usize) -> &[S] {
        let len = self.shape.map_len();
        let off = (group * self.shape.heads + head) * len;
        &self.probs[off..off + len]
    }

    pub fn biased_map(&self, group: usize, head: usize) -> &[S] {
        let len = self.shape.map_len();
        let off = (group * self.shape.heads + head) * len;
        match &self.biased {
            Some(b) => &b[off..off + len],
            None => &self.probs[off..off + len],
        }
    }

    fn effective(&self) -> &[S] {
        self.biased.as_deref().unwrap_or(&self.probs)
    }
}

struct AttentionNode<S> {
    q: Var,
    k: Var,
    v: Var,
    record: AttentionRecord<S>,
    /// Row sums of `A + λH` when renormalizing.
    row_sums: Option<Vec<S>>,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Vec<S> },
    Unfold { x: Var, patch_len: usize, stride: usize, patches: usize },
    Attention(Box<AttentionNode<S>>),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for leaf `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<S> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64_lossy(0.044715);
    let half = S::from_f64_lossy(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64_lossy(0.044715);
    let three = S::from_f64_lossy(3.0);
    let half = S::from_f64_lossy(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<S>>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn attention_record(&self, v: Var) -> Option<&AttentionRecord<S>> {
        match &self.nodes[v.0].op {
            Op::Attention(node) => Some(&node.record),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `a + tile(b)`: `b` is repeated to cover `a` (bias rows, positional tables).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() % tb.len() != 0 {
            return Err(Error::shape(
                "add_tiled",
                format!("{:?} is not a multiple of {:?}", ta.shape(), tb.shape()),
            ));
        }
        let period = tb.len();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + tb.data()[i % period];
        }
        self.push(out, Op::AddTiled(a, b), &[a, b], "add_tiled")
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    /// Matrix product. `a` may be any rank and is read as rows × last-dim.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut c = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            (ta.data(), k as isize, 1),
            (tb.data(), n as isize, 1),
            S::zero(),
            (&mut c, n as isize, 1),
        );
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, c)?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = match act {
            Activation::Relu => self.value(a).map(|x| x.max(S::zero())),
            Activation::Gelu => self.value(a).map(gelu),
        };
        self.push(out, Op::Act(a, act), &[a], "activation")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Gelu)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(a))?;
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Normalizes each row over the last dim, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {n} entries")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = S::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias], "layer_norm")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / S::from_usize(t.len()).unwrap());
        self.push(out, Op::Mean(a), &[a], "mean")
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let n = S::from_usize(p.len()).unwrap();
        let sse: S = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(sse / n);
        let op = Op::Mse { pred, target: target.data().to_vec() };
        self.push(out, op, &[pred], "mse_loss")
    }

    /// Slides a window along the last dim: `[rows, T] -> [rows * patches, patch_len]`.
    pub fn unfold(&mut self, x: Var, patch_len: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let len = t.cols();
        if patch_len == 0 || stride == 0 || patch_len > len || !(len - patch_len).is_multiple_of(stride) {
            return Err(Error::shape(
                "unfold",
                format!("length {len} with patch {patch_len} stride {stride}"),
            ));
        }
        let patches = (len - patch_len) / stride + 1;
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * patches * patch_len);
        for row in t.data().chunks(len) {
            for p in 0..patches {
                out.extend_from_slice(&row[p * stride..p * stride + patch_len]);
            }
        }
        let out = Tensor::new(&[rows * patches, patch_len], out)?;
        self.push(out, Op::Unfold { x, patch_len, stride, patches }, &[x], "unfold")
    }

    /// Fused multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `[groups * tokens, heads * head_dim]`; head `h` owns
    /// columns `h*head_dim..(h+1)*head_dim`. With a bias, `Â = A + λH` is formed
    /// after the softmax and used in place of `A`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        bias: Option<&AttentionBias<S>>,
    ) -> Result<Var> {
        let d = shape.model_dim();
        let rows = shape.groups * shape.tokens;
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            let t = self.value(var);
            if t.rows() != rows || t.cols() != d {
                return Err(Error::shape(
                    "attention",
                    format!("{name} is {:?}, expected [{rows}, {d}]", t.shape()),
                ));
            }
        }
        if let Some(b) = bias {
            if b.matrix.shape() != [shape.tokens, shape.tokens] {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "hint is {:?}, expected [{}, {}]",
                        b.matrix.shape(),
                        shape.tokens,
                        shape.tokens
                    ),
                ));
            }
        }
        let n = shape.tokens;
        let dk = shape.head_dim;
        let nn = shape.map_len();
        let scale = S::one() / S::from_usize(dk).unwrap().sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let maps = shape.groups * shape.heads;
        let mut probs = vec![S::zero(); maps * nn];
        let mut biased = bias.map(|_| vec![S::zero(); maps * nn]);
        let mut row_sums = bias.filter(|b| b.renormalize).map(|_| vec![S::zero(); maps * n]);
        let mut ctx = vec![S::zero(); rows * d];
        let ld = d as isize;
        for g in 0..shape.groups {
            for h in 0..shape.heads {
                let m = g * shape.heads + h;
                let off = g * n * d + h * dk;
                let a = &mut probs[m * nn..(m + 1) * nn];
                S::gemm(n, dk, n, scale, (&tq[off..], ld, 1), (&tk[off..], 1, ld), S::zero(), (a, n as isize, 1));
                for row in a.chunks_mut(n) {
                    softmax_in_place(row);
                }
                let eff: &[S] = match (bias, biased.as_mut()) {
                    (Some(b), Some(out)) => {
                        let hb = &mut out[m * nn..(m + 1) * nn];
                        for ((o, &p), &hv) in hb.iter_mut().zip(a.iter()).zip(b.matrix.data()) {
                            *o = p + b.lambda * hv;
                        }
                        if let Some(sums) = row_sums.as_mut() {
                            for (i, row) in hb.chunks_mut(n).enumerate() {
                                let s: S = row.iter().copied().sum();
                                sums[m * n + i] = s;
                                for x in row.iter_mut() {
                                    *x = *x / s;
                                }
                            }
                        }
                        hb
                    }
                    _ => a,
                };
                S::gemm(n, n, dk, S::one(), (eff, n as isize, 1), (&tv[off..], ld, 1), S::zero(), (&mut ctx[off..], ld, 1));
            }
        }
        let out = Tensor::new(&[rows, d], ctx)?;
        let record = AttentionRecord { shape, probs, biased };
        let node = AttentionNode { q, k, v, record, row_sums };
        self.push(out, Op::Attention(Box::new(node)), &[q, k, v], "attention")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite(&format!("gradient of node {i}"))?;
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddTiled(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let mut gb = Tensor::zeros(tb.shape());
                    let period = tb.len();
                    for (i, &x) in g.data().iter().enumerate() {
                        let slot = &mut gb.data_mut()[i % period];
                        *slot = *slot + x;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), (g.data(), n as isize, 1), (tb.data(), 1, n as isize), S::zero(), (&mut da, k as isize, 1));
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), da)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), (ta.data(), 1, k as isize), (g.data(), n as isize, 1), S::zero(), (&mut db, n as isize, 1));
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), db)?);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose2()?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Act(a, act) => {
                let x = self.value(*a);
                let d = match act {
                    Activation::Relu => {
                        g.zip_map(x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })?
                    }
                    Activation::Gelu => g.zip_map(x, |gv, xv| gv * gelu_grad(xv))?,
                };
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: S = drow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = g.cols();
                let nf = S::from_usize(n).unwrap();
                let gain_v = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, hrow)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            let dh = grow[j] * gain_v[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hrow[j];
                        }
                        for j in 0..n {
                            let dh = grow[j] * gain_v[j];
                            dx.push(inv_std[r] / nf * (nf * dh - s1 - hrow[j] * s2));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![S::zero(); n];
                    let mut db = vec![S::zero(); n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                            db[j] = db[j] + grow[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(&gs, dg)?);
                    self.accumulate(grads, *bias, Tensor::new(&bs, db)?);
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.data()[0] / S::from_usize(t.len()).unwrap();
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = g.data()[0] * S::from_f64_lossy(2.0) / S::from_usize(p.len()).unwrap();
                let d: Vec<S> = p.data().iter().zip(target).map(|(&a, &b)| c * (a - b)).collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape(), d)?);
            }
            Op::Unfold { x, patch_len, stride, patches } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let len = tx.cols();
                    let mut dx = Tensor::zeros(tx.shape());
                    let per_row = patches * patch_len;
                    for (drow, grow) in dx.data_mut().chunks_mut(len).zip(g.data().chunks(per_row)) {
                        for p in 0..*patches {
                            let src = &grow[p * patch_len..(p + 1) * patch_len];
                            for (dst, &v) in drow[p * stride..p * stride + patch_len].iter_mut().zip(src) {
                                *dst = *dst + v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention(att) => self.attention_backward(att, g, grads)?,
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        att: &AttentionNode<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let shape = att.record.shape;
        let (n, dk, d) = (shape.tokens, shape.head_dim, shape.model_dim());
        let nn = shape.map_len();
        let ld = d as isize;
        let scale = S::one() / S::from_usize(dk).unwrap().sqrt();
        let (tq, tk, tv) = (self.value(att.q).data(), self.value(att.k).data(), self.value(att.v).data());
        let rows = shape.groups * n;
        let mut dq = vec![S::zero(); rows * d];
        let mut dk_buf = vec![S::zero(); rows * d];
        let mut dv = vec![S::zero(); rows * d];
        let mut d_eff = vec![S::zero(); nn];
        let probs = &att.record.probs;
        let eff = att.record.effective();
        let gd = g.data();
        for gi in 0..shape.groups {
            for h in 0..shape.heads {
                let m = gi * shape.heads + h;
                let off = gi * n * d + h * dk;
                let a = &probs[m * nn..(m + 1) * nn];
                let e = &eff[m * nn..(m + 1) * nn];
                // dV = Âᵀ · dC
                S::gemm(n, n, dk, S::one(), (e, 1, n as isize), (&gd[off..], ld, 1), S::zero(), (&mut dv[off..], ld, 1));
                // dÂ = dC · Vᵀ
                S::gemm(n, dk, n, S::one(), (&gd[off..], ld, 1), (&tv[off..], 1, ld), S::zero(), (&mut d_eff, n as isize, 1));
                if let Some(sums) = &att.row_sums {
                    for (i, row) in d_eff.chunks_mut(n).enumerate() {
                        let erow = &e[i * n..(i + 1) * n];
                        let dot: S = row.iter().zip(erow).map(|(&x, &y)| x * y).sum();
                        let s = sums[m * n + i];
                        for x in row.iter_mut() {
                            *x = (*x - dot) / s;
                        }
                    }
                }
                // through the softmax, in place: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                for (drow, arow) in d_eff.chunks_mut(n).zip(a.chunks(n)) {
                    let dot: S = drow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in drow.iter_mut().zip(arow) {
                        *x = y * (*x - dot);
                    }
                }
                // dQ = dS · K · scale, dK = dSᵀ · Q · scale
                S::gemm(n, n, dk, scale, (&d_eff, n as isize, 1), (&tk[off..], ld, 1), S::zero(), (&mut dq[off..], ld, 1));
                S::gemm(n, n, dk, scale, (&d_eff, 1, n as isize), (&tq[off..], ld, 1), S::zero(), (&mut dk_buf[off..], ld, 1));
            }
        }
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        self.accumulate(grads, att.q, Tensor::new(&shape_of(att.q), dq)?);
        self.accumulate(grads, att.k, Tensor::new(&shape_of(att.k), dk_buf)?);
        self.accumulate(grads, att.v, Tensor::new(&shape_of(att.v), dv)?);
        Ok(())
    }
}
