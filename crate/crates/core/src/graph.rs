//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar loss with respect to every trainable parameter that was pulled
//! into the graph with [`Graph::param`]. All ops interpret a tensor as a
//! `rows × cols` matrix where `cols` is the last axis.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Gelu(Var),
    Softplus(Var),
    SumAll(Var),
    MeanRows(Var),
    SumLast(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp { x: Var, mask: Option<Vec<bool>>, floor: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Single-threaded; build one per forward pass.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Graph<'s> {
    /// A graph with no parameter store; only constants can enter it.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(id) => self.store.is_some_and(|s| s.get(*id).trainable),
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node
    /// so each parameter is visited once by `backward`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = tensor(&[m, n], tensor::matmul(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err("matmul_nt", ta, tb));
        }
        let out = tensor(&[m, n], tensor::matmul_nt(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = tensor(ta.shape(), data);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector (length `cols`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(dim_err("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta.data().chunks(c).flat_map(|row| row.iter().zip(r).map(|(x, y)| x + y)).collect();
        let out = tensor(ta.shape(), data);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = tensor(ta.shape(), ta.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(dim_err("scale_by", ta, ts));
        }
        let sv = ts.item();
        let out = tensor(ta.shape(), ta.data().iter().map(|x| x * sv).collect());
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = tensor(ta.shape(), ta.data().iter().map(|x| f(*x)).collect());
        self.push(out, op)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `[rows, cols] → [1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for row in ta.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(tensor(&[1, c], out), Op::MeanRows(a))
    }

    /// Row sums, `[rows, cols] → [rows, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let out = ta.data().chunks(c).map(|row| row.iter().sum()).collect();
        self.push(tensor(&[r, 1], out), Op::SumLast(a))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let out = tensor(ta.shape(), out);
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let out = tensor(ta.shape(), out);
        self.push(out, Op::LogSoftmax(a))
    }

    /// `max(log Σ_{j: mask[i,j]} exp(a[i,j]), floor)` per row, `→ [rows, 1]`.
    ///
    /// Rows with no selected entries evaluate to `floor`. The result is
    /// finite whenever `floor` is.
    pub fn log_sum_exp(&mut self, a: Var, mask: Option<Vec<bool>>, floor: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if let Some(m) = &mask {
            if m.len() != ta.len() {
                return Err(TensorError::Contract(format!(
                    "log_sum_exp mask has {} entries for shape {:?}",
                    m.len(),
                    ta.shape()
                )));
            }
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let sel = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
            let mx = (0..c).filter(|&j| sel(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = if mx == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                mx + (0..c).filter(|&j| sel(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln()
            };
            out.push(lse.max(floor));
        }
        let out = tensor(&[r, 1], out);
        Ok(self.push(out, Op::LogSumExp { x: a, mask, floor }))
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` (length `cols`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (ta, tg, tb) = (self.value(a), self.value(gamma), self.value(beta));
        let c = ta.cols();
        if tg.len() != c {
            return Err(dim_err("layer_norm", ta, tg));
        }
        if tb.len() != c {
            return Err(dim_err("layer_norm", ta, tb));
        }
        let mut xhat = Vec::with_capacity(ta.len());
        let mut inv_std = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, x) in row.iter().enumerate() {
                let h = (x - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = tensor(ta.shape(), out);
        Ok(self.push(out, Op::LayerNorm { x: a, gamma, beta, xhat, inv_std }))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= eps {
                log::debug!("l2_normalize: row norm {n:e} at or below eps {eps:e}");
            }
            let d = n.max(eps);
            // eps == 0 with a zero row: leave the zeros in place
            if d == 0.0 {
                out.extend(row.iter().map(|_| 0.0));
            } else {
                out.extend(row.iter().map(|x| x / d));
            }
            norms.push(n);
        }
        let out = tensor(ta.shape(), out);
        self.push(out, Op::L2Normalize { x: a, norms, eps })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let c = ta.cols();
        if start >= end || end > c {
            return Err(TensorError::Contract(format!(
                "column slice {start}..{end} out of range for {:?}",
                ta.shape()
            )));
        }
        let data = ta.data().chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        let out = tensor(&[ta.rows(), end - start], data);
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?);
        let r = first.rows();
        for p in parts {
            if self.value(*p).rows() != r {
                return Err(dim_err("concat_cols", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = tensor(&[r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?);
        let c = first.cols();
        for p in parts {
            if self.value(*p).cols() != c {
                return Err(dim_err("concat_rows", first, self.value(*p)));
            }
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let r = data.len() / c;
        let out = tensor(&[r, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(TensorError::Contract(format!("row selection {idx:?} invalid for {:?}", ta.shape())));
        }
        let data = idx.iter().flat_map(|&i| ta.row(i).iter().copied()).collect();
        let out = tensor(&[idx.len(), c], data);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Gradients of the one-element `loss` with respect to every trainable
    /// parameter on the tape. Parameters the loss does not depend on get
    /// zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, var) in &self.param_vars {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            let shape = self.nodes[var.0].value.shape();
            let g = match grads[var.0].take() {
                Some(g) => tensor(shape, g),
                None => Tensor::zeros(shape),
            };
            out.insert(*id, g);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    acc(*a, tensor::matmul_nt(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn_acc(&mut db, ta.data(), g, m, k, n);
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(*a) {
                    acc(*a, tensor::matmul(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    tensor::matmul_tn_acc(&mut db, g, ta.data(), m, n, k);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                acc(*a, tensor::transpose(g, y.rows(), y.cols()));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                if wants(*row) {
                    let c = y.cols();
                    let mut dr = vec![0.0; c];
                    for grow in g.chunks(c) {
                        dr.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                    }
                    acc(*row, dr);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::ScaleBy(a, s) => {
                let ta = val(*a);
                let sv = val(*s).item();
                if wants(*a) {
                    acc(*a, g.iter().map(|x| x * sv).collect());
                }
                if wants(*s) {
                    let ds = g.iter().zip(ta.data()).map(|(g, x)| g * x).sum();
                    acc(*s, vec![ds]);
                }
            }
            Op::Exp(a) => acc(*a, g.iter().zip(y.data()).map(|(g, y)| g * y).collect()),
            Op::Ln(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
            Op::ClampMin(a, floor) => {
                acc(*a, g.iter().zip(val(*a).data()).map(|(g, x)| if *x > *floor { *g } else { 0.0 }).collect())
            }
            Op::Gelu(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(g, x)| g * gelu_grad(*x)).collect()),
            Op::Softplus(a) => acc(*a, g.iter().zip(val(*a).data()).map(|(g, x)| g * sigmoid(*x)).collect()),
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::MeanRows(a) => {
                let ta = val(*a);
                let r = ta.rows() as f64;
                let scaled: Vec<f64> = g.iter().map(|x| x / r).collect();
                acc(*a, (0..ta.rows()).flat_map(|_| scaled.iter().copied()).collect());
            }
            Op::SumLast(a) => {
                let c = val(*a).cols();
                acc(*a, g.iter().flat_map(|x| std::iter::repeat_n(*x, c)).collect());
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * gs));
                }
                acc(*a, dx);
            }
            Op::LogSumExp { x, mask, floor } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (i, gi) in g.iter().enumerate() {
                    let out = y.data()[i];
                    let sel = |j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
                    // clamped rows (including empty selections) pass no gradient
                    if !(out > *floor) || out == f64::NEG_INFINITY {
                        continue;
                    }
                    let row = tx.row(i);
                    for j in 0..c {
                        if sel(j) {
                            dx[i * c + j] = gi * (row[j] - out).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = y.cols();
                let tg = val(*gamma).data();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(y.len());
                    for (i, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(tg).map(|(g, w)| g * w).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                        let k = inv_std[i] / c as f64;
                        dx.extend(dh.iter().zip(hr).map(|(d, h)| k * (c as f64 * d - s1 - h * s2)));
                    }
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                    acc(*beta, db);
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (i, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let n = norms[i];
                    if n > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / n));
                    } else if *eps > 0.0 {
                        dx.extend(gr.iter().map(|g| g / eps));
                    } else {
                        dx.extend(gr.iter().map(|_| 0.0));
                    }
                }
                acc(*x, dx);
            }
            Op::SliceCols(a, start, end) => {
                let ta = val(*a);
                let c = ta.cols();
                let w = end - start;
                let mut dx = vec![0.0; ta.len()];
                for (i, gr) in g.chunks(w).enumerate() {
                    dx[i * c + start..i * c + end].copy_from_slice(gr);
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if wants(*p) {
                        let dx = g.chunks(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                        acc(*p, dx);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRows(a, idx) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut dx = vec![0.0; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[k * c + j];
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::ClampMin(a, _)
        | Op::Gelu(a)
        | Op::Softplus(a)
        | Op::SumAll(a)
        | Op::MeanRows(a)
        | Op::SumLast(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::SliceCols(a, _, _)
        | Op::SelectRows(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::LogSumExp { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
    }
}
