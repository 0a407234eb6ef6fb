use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Abs,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    NormalizePairs(Var),
    Bce(Var, Vec<f64>),
    Focal {
        x: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so a
/// reverse sweep visits every consumer before its inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    faulty: bool,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    // ln p and ln(1-p) without cancellation
    let ln_p = -softplus(-x);
    let ln_q = -softplus(x);
    if t > 0.5 {
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * ln_p;
        let grad = alpha * w * (gamma * p * ln_p - (1.0 - p));
        (loss, grad)
    } else {
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * ln_q;
        let grad = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * ln_q);
        (loss, grad)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately skews the weight-side matmul gradient by 1%. Only useful
    /// as a negative control for gradient checking.
    pub fn inject_fault(&mut self) {
        self.faulty = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input. Constants receive gradients but are not parameters.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Pulls a named parameter onto the tape; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        Ok(v)
    }

    fn dims(&self, v: Var, ctx: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(ctx, format!("operand has shape {:?}", self.value(v).shape())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push(Tensor::raw(vec![n, m], out), Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                ctx,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, ctx: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, ctx)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_operand(&self, a: Var, b: Var, ctx: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a, ctx)?;
        let (br, bc) = self.dims(b, ctx)?;
        if br != 1 || bc != n {
            return Err(Error::shape(ctx, format!("row operand {br}x{bc} for {m}x{n}")));
        }
        Ok((m, n))
    }

    /// `a + b` with the single row `b` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_operand(a, b, "add_row")?;
        let bd = self.value(b).data();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::AddRow(a, b)))
    }

    /// `a ⊙ b` with the single row `b` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_operand(a, b, "mul_row")?;
        let bd = self.value(b).data();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bd[i % n]).collect();
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MulRow(a, b)))
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, n) = self.dims(a, "repeat_rows")?;
        if r != 1 {
            return Err(Error::shape("repeat_rows", format!("expected one row, got {r}")));
        }
        let out = self.value(a).data().repeat(times);
        Ok(self.push(Tensor::raw(vec![times, n], out), Op::RepeatRows(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, out), Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a);
        let f = |x: f64| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
        };
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, out), Op::Unary(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a, "softmax_rows")?;
        if n == 0 {
            return Err(Error::Empty("softmax over an empty axis".into()));
        }
        let y = super::softmax(&self.value(a).clone().reshape(vec![self.value(a).rows(), n])?, 1)?;
        Ok(self.push(y, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        self.row_operand(x, gamma, "layer_norm.gamma")?;
        self.row_operand(x, beta, "layer_norm.beta")?;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gd[c] + bd[c];
            }
        }
        Ok(self.push(
            Tensor::raw(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.dims(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {m}")));
        }
        let out = self.value(a).gather_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat_cols of nothing".into()))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::raw(vec![m, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + end]);
        }
        Ok(self.push(Tensor::raw(vec![m, w], out), Op::SliceCols(a, start)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += d[r * n + c];
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        Ok(self.push(Tensor::raw(vec![1, n], out), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::raw(vec![1, 1], vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Rescales consecutive column pairs to unit length, turning raw
    /// (sin, cos) head outputs into a point on the unit circle.
    pub fn normalize_pairs(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "normalize_pairs")?;
        if n % 2 != 0 {
            return Err(Error::shape("normalize_pairs", format!("odd column count {n}")));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for p in 0..m * n / 2 {
            let (s, c) = (d[2 * p], d[2 * p + 1]);
            let r = (s * s + c * c).sqrt().max(1e-12);
            out[2 * p] = s / r;
            out[2 * p + 1] = c / r;
        }
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::NormalizePairs(a)))
    }

    fn check_targets(&self, x: Var, targets: &[f64], ctx: &str) -> Result<()> {
        if self.value(x).len() != targets.len() {
            return Err(Error::shape(
                ctx,
                format!("{} logits vs {} targets", self.value(x).len(), targets.len()),
            ));
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument(format!("{ctx}: targets must be 0 or 1")));
        }
        Ok(())
    }

    /// Element-wise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        self.check_targets(x, targets, "bce_with_logits")?;
        let t = self.value(x);
        let out = t.data().iter().zip(targets).map(|(&z, &y)| softplus(z) - y * z).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::Bce(x, targets.to_vec())))
    }

    /// Element-wise sigmoid focal loss on logits.
    pub fn focal_with_logits(&mut self, x: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        self.check_targets(x, targets, "focal_with_logits")?;
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::Focal {
                x,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", lt.shape())));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(Tensor::raw(self.nodes[v.0].value.shape().to_vec(), delta)),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let bt = transpose_raw(self.value(*b).data(), k, n);
                acc(*a, matmul_raw(gd, &bt, m, n, k));
                let at = transpose_raw(self.value(*a).data(), m, k);
                let mut gb = matmul_raw(&at, gd, k, m, n);
                if self.faulty {
                    gb.iter_mut().for_each(|x| *x *= 1.01);
                }
                acc(*b, gb);
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                acc(*a, transpose_raw(gd, n, m));
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bd).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(ad).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bd).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    gd.iter().zip(ad).zip(bd).map(|((g, x), y)| -g * x / (y * y)).collect(),
                );
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                acc(*a, gd.to_vec());
                acc(*b, column_sums(gd, n));
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).len();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().enumerate().map(|(i, g)| g * bd[i % n]).collect());
                let prod: Vec<f64> = gd.iter().zip(ad).map(|(g, x)| g * x).collect();
                acc(*b, column_sums(&prod, n));
            }
            Op::RepeatRows(a) => {
                let n = self.value(*a).len();
                acc(*a, column_sums(gd, n));
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|g| g * s).collect()),
            Op::Unary(a, kind) => {
                let xd = self.value(*a).data();
                let yd = node.value.data();
                let d: Vec<f64> = (0..gd.len())
                    .map(|j| {
                        let local = match kind {
                            Unary::Relu => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => yd[j] * (1.0 - yd[j]),
                            Unary::Exp => yd[j],
                            Unary::Abs => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else if xd[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Softplus => sigmoid(xd[j]),
                        };
                        gd[j] * local
                    })
                    .collect();
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2().unwrap();
                let yd = node.value.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = gd[row.clone()].iter().zip(&yd[row.clone()]).map(|(g, y)| g * y).sum();
                    for j in row {
                        d[j] = yd[j] * (gd[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for c in 0..n {
                        let j = r * n + c;
                        let gh = gd[j] * gam[c];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[j];
                        dgamma[c] += gd[j] * xhat[j];
                        dbeta[c] += gd[j];
                    }
                    mean_gh /= n as f64;
                    mean_ghx /= n as f64;
                    for c in 0..n {
                        let j = r * n + c;
                        let gh = gd[j] * gam[c];
                        dx[j] = inv_std[r] * (gh - mean_gh - xhat[j] * mean_ghx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut d = vec![0.0; m * n];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..n {
                        d[r * n + c] += gd[k * n + c];
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, d);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let w = node.value.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let d = (0..m * n).map(|j| gd[j % n] / m as f64).collect();
                acc(*a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![gd[0]; n]);
            }
            Op::NormalizePairs(a) => {
                let xd = self.value(*a).data();
                let yd = node.value.data();
                let mut d = vec![0.0; xd.len()];
                for p in 0..xd.len() / 2 {
                    let r = (xd[2 * p].powi(2) + xd[2 * p + 1].powi(2)).sqrt().max(1e-12);
                    let dot = gd[2 * p] * yd[2 * p] + gd[2 * p + 1] * yd[2 * p + 1];
                    d[2 * p] = (gd[2 * p] - yd[2 * p] * dot) / r;
                    d[2 * p + 1] = (gd[2 * p + 1] - yd[2 * p + 1] * dot) / r;
                }
                acc(*a, d);
            }
            Op::Bce(a, targets) => {
                let xd = self.value(*a).data();
                let d = (0..xd.len()).map(|j| gd[j] * (sigmoid(xd[j]) - targets[j])).collect();
                acc(*a, d);
            }
            Op::Focal {
                x,
                targets,
                alpha,
                gamma,
            } => {
                let xd = self.value(*x).data();
                let d = (0..xd.len())
                    .map(|j| gd[j] * focal_term(xd[j], targets[j], *alpha, *gamma).1)
                    .collect();
                acc(*x, d);
            }
        }
    }

    /// Parameter gradients from a backward pass, in parameter-id order.
    pub fn param_gradients<'a>(&self, grads: &'a Gradients) -> Vec<(ParamId, &'a Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| grads.of(v).map(|g| (id, g)))
            .collect()
    }
}

fn column_sums(d: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (j, x) in d.iter().enumerate() {
        out[j % n] += x;
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{grad_check, ParamStore};

    fn random(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
    }

    fn store_with(entries: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        for (name, shape) in entries {
            s.insert(name, random(&mut rng, shape.clone())).unwrap();
        }
        s
    }

    /// Checks a scalar function of the parameters against finite differences.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) {
        let report = grad_check(
            store,
            |s| {
                let mut g = Graph::new();
                let v = f(&mut g, s)?;
                Ok((g, v))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn matmul_transpose_add_sub() {
        let s = store_with(&[("a", vec![3, 4]), ("b", vec![4, 2]), ("c", vec![2, 3])], 1);
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.param(s, "c")?;
            let ab = g.matmul(a, b)?;
            let ct = g.transpose(c)?;
            let d = g.sub(ab, ct)?;
            let e = g.add(d, ab)?;
            let sq = g.mul(e, e)?;
            Ok(g.sum(sq))
        });
    }

    #[test]
    fn broadcast_ops_and_div() {
        let s = store_with(&[("a", vec![3, 4]), ("r", vec![1, 4]), ("q", vec![1, 4])], 2);
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let r = g.param(s, "r")?;
            let q = g.param(s, "q")?;
            let x = g.add_row(a, r)?;
            let y = g.mul_row(x, q)?;
            let rep = g.repeat_rows(q, 3)?;
            let e = g.exp(rep);
            let z = g.div(y, e)?;
            let w = g.scale(z, 0.7);
            let sq = g.mul(w, w)?;
            Ok(g.mean(sq))
        });
    }

    #[test]
    fn unary_ops() {
        let s = store_with(&[("a", vec![2, 5])], 3);
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let r = g.relu(a);
            let sg = g.sigmoid(a);
            let sp = g.softplus(a);
            let ab = g.abs(a);
            let t = g.add(r, sg)?;
            let t = g.mul(t, sp)?;
            let t = g.add(t, ab)?;
            Ok(g.sum(t))
        });
    }

    #[test]
    fn softmax_layernorm_gather_concat_slice() {
        let s = store_with(
            &[("a", vec![4, 3]), ("gamma", vec![1, 3]), ("beta", vec![1, 3]), ("w", vec![4, 6])],
            4,
        );
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let gm = g.param(s, "gamma")?;
            let bt = g.param(s, "beta")?;
            let w = g.param(s, "w")?;
            let ln = g.layer_norm(a, gm, bt, 1e-5)?;
            let sm = g.softmax_rows(ln)?;
            let gat = g.gather_rows(sm, &[2, 0, 2])?;
            let cat = g.concat_cols(&[gat, gat])?;
            let sl = g.slice_cols(cat, 1, 5)?;
            let ww = g.slice_cols(w, 0, 4)?;
            let ww = g.gather_rows(ww, &[0, 1, 3])?;
            let prod = g.mul(sl, ww)?;
            let mr = g.mean_rows(prod)?;
            let sq = g.mul(mr, mr)?;
            Ok(g.sum(sq))
        });
    }

    #[test]
    fn normalize_pairs_and_losses() {
        let s = store_with(&[("a", vec![3, 4]), ("l", vec![2, 3])], 5);
        check(&s, |g, s| {
            let a = g.param(s, "a")?;
            let l = g.param(s, "l")?;
            let n = g.normalize_pairs(a)?;
            let m = g.mul(n, a)?;
            let bce = g.bce_with_logits(l, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
            let foc = g.focal_with_logits(l, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0], 0.25, 2.0)?;
            let x = g.sum(m);
            let y = g.sum(bce);
            let z = g.sum(foc);
            let xy = g.add(x, y)?;
            g.add(xy, z)
        });
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0).unwrap());
        let f = g.focal_with_logits(x, &[1.0], 1.0, 0.0).unwrap();
        assert!((g.value(f).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.bce_with_logits(a, &[0.5; 6]).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shared_param_node_accumulates() {
        let s = store_with(&[("w", vec![1, 1])], 6);
        let mut g = Graph::new();
        let w1 = g.param(&s, "w").unwrap();
        let w2 = g.param(&s, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let pg = g.param_gradients(&grads);
        let w = s.value_by_name("w").unwrap().item();
        assert!((pg[0].1.item() - 2.0 * w).abs() < 1e-15);
    }
}
