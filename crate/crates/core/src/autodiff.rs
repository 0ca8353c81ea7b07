//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] is an append-only tape. Every operation appends one node whose
//! inputs are earlier nodes, so the tape order is a topological order and the
//! backward pass visits each node once, in reverse.

use crate::error::{dim_err, Error, Result};
use crate::expfamily::{standardized_kl_with_grad, LatentFamily};
use crate::tensor::{axpy, Tensor};

/// Probability clamp applied before every logarithm of a sigmoid output.
pub const PROB_CLAMP: f64 = 1e-7;

/// Variance guard in batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maxout2(Var, Vec<usize>),
    Sum(Var),
    SumRows(Var),
    ScaleRows(Var, Vec<f64>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    BatchNorm(Var, Vec<f64>),
    SoftmaxCrossEntropy(Var, Tensor),
    BinaryCrossEntropy(Var, Tensor),
    GenerativeError(Var, Var, LatentFamily),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of values and the operations that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `∂root/∂v` for every node that requires a gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input held fixed under differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    /// `x[B×K] + bias[K]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != k || b.shape().len() != 1 {
            return dim_err(format!(
                "bias of shape {:?} does not match {k} columns",
                b.shape()
            ));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(k) {
            axpy(row, 1.0, b.data());
        }
        self.derived(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.derived(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.derived(v, Op::AddScalar(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.derived(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.derived(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.derived(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Domain("log of a non-positive entry".into()));
        }
        let v = self.value(x).map(f64::ln);
        self.derived(v, Op::Log(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        self.derived(v, Op::Abs(x), &[x])
    }

    /// `out[b,k] = max(x[b,2k], x[b,2k+1])`; ties pick the first unit.
    pub fn maxout2(&mut self, x: Var) -> Result<Var> {
        let (b, two_k) = self.value(x).dims2()?;
        if two_k % 2 != 0 {
            return dim_err(format!("maxout2 needs an even width, got {two_k}"));
        }
        let k = two_k / 2;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * k);
        let mut arg = Vec::with_capacity(b * k);
        for i in 0..b * k {
            let (lo, hi) = (src[2 * i], src[2 * i + 1]);
            if hi > lo {
                out.push(hi);
                arg.push(2 * i + 1);
            } else {
                out.push(lo);
                arg.push(2 * i);
            }
        }
        let v = Tensor::new(vec![b, k], out)?;
        self.derived(v, Op::Maxout2(x, arg), &[x])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(v, Op::Sum(x), &[x])
    }

    /// Per-row sums of a matrix, shape `[B]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (b, k) = self.value(x).dims2()?;
        let data = self.value(x).data().chunks(k.max(1)).map(|r| r.iter().sum()).collect();
        let v = if k == 0 {
            Tensor::zeros(&[b])
        } else {
            Tensor::new(vec![b], data)?
        };
        self.derived(v, Op::SumRows(x), &[x])
    }

    /// Multiplies row `i` (or entry `i` of a vector) by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != w.len() || t.shape().is_empty() {
            return dim_err(format!(
                "{} row weights for shape {:?}",
                w.len(),
                t.shape()
            ));
        }
        let c = t.len() / w.len().max(1);
        let mut out = t.clone();
        for (row, &wi) in out.data_mut().chunks_mut(c.max(1)).zip(w) {
            row.iter_mut().for_each(|a| *a *= wi);
        }
        self.derived(out, Op::ScaleRows(x, w.to_vec()), &[x])
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(indices)?;
        self.derived(v, Op::SelectRows(x, indices.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        self.derived(v, Op::Transpose(x), &[x])
    }

    /// Per-column de-meaning and division by the root second moment of the
    /// current batch. No learned affine term.
    pub fn batchnorm(&mut self, x: Var) -> Result<Var> {
        let (b, k) = self.value(x).dims2()?;
        if b < 2 {
            return Err(Error::Contract(format!(
                "batch normalization needs at least 2 rows, got {b}"
            )));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; k];
        for row in src.chunks(k) {
            axpy(&mut mean, 1.0, row);
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; k];
        for row in src.chunks(k) {
            for ((v, &a), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (a - m) * (a - m);
            }
        }
        let inv_sd: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / b as f64 + BATCHNORM_EPS).sqrt())
            .collect();
        let mut out = Vec::with_capacity(b * k);
        for row in src.chunks(k) {
            for j in 0..k {
                out.push((row[j] - mean[j]) * inv_sd[j]);
            }
        }
        let v = Tensor::new(vec![b, k], out)?;
        self.derived(v, Op::BatchNorm(x, inv_sd), &[x])
    }

    /// Per-row negative log-likelihood of `labels` under `softmax(logits)`,
    /// shape `[B]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return dim_err(format!("{} labels for {b} rows", labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {l} out of range for {c} classes")));
        }
        let probs = softmax(self.value(logits))?;
        let loss: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = self.value(logits).row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .collect();
        // Gradient rows are softmax − one-hot.
        let mut grad = probs;
        for (i, &l) in labels.iter().enumerate() {
            grad.data_mut()[i * c + l] -= 1.0;
        }
        let v = Tensor::new(vec![b], loss)?;
        self.derived(v, Op::SoftmaxCrossEntropy(logits, grad), &[logits])
    }

    /// Per-row binary cross-entropy of `sigmoid(logits)` against `target`,
    /// with probabilities clamped to `[1e-7, 1 − 1e-7]`; shape `[B]`.
    pub fn binary_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (b, n) = self.value(logits).dims2()?;
        same_shape(self.value(logits), target, "binary cross-entropy")?;
        let mut loss = vec![0.0; b];
        let mut grad = Vec::with_capacity(b * n);
        for (i, (lrow, trow)) in self
            .value(logits)
            .data()
            .chunks(n.max(1))
            .zip(target.data().chunks(n.max(1)))
            .enumerate()
        {
            let mut s = 0.0;
            for (&z, &x) in lrow.iter().zip(trow) {
                let p_raw = sigmoid(z);
                let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                s -= x * p.ln() + (1.0 - x) * (1.0 - p).ln();
                // The clamp is flat outside its range.
                let inside = p == p_raw;
                let d = if inside {
                    p_raw - x
                } else {
                    0.0
                };
                grad.push(d);
            }
            loss[i] = s;
        }
        let v = Tensor::new(vec![b], loss)?;
        let g = Tensor::new(vec![b, n], grad)?;
        self.derived(v, Op::BinaryCrossEntropy(logits, g), &[logits])
    }

    /// Per-row closed-form generative error of `(μ, log σ)` against the
    /// standardized prior of `family`; shape `[B]`.
    pub fn generative_error(&mut self, mean: Var, log_sd: Var, family: LatentFamily) -> Result<Var> {
        same_shape(self.value(mean), self.value(log_sd), "generative error")?;
        let (b, l) = self.value(mean).dims2()?;
        let mut out = vec![0.0; b];
        for i in 0..b {
            for j in 0..l {
                let (v, _, _) = standardized_kl_with_grad(
                    family,
                    self.value(mean).get2(i, j),
                    self.value(log_sd).get2(i, j),
                );
                out[i] += v;
            }
        }
        let v = Tensor::new(vec![b], out)?;
        self.derived(v, Op::GenerativeError(mean, log_sd, family), &[mean, log_sd])
    }

    /// Gradients of the scalar node `root` with respect to every node that
    /// requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?)?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*bias) {
                    let k = self.value(*bias).len();
                    let mut gb = vec![0.0; k];
                    for row in g.data().chunks(k) {
                        axpy(&mut gb, 1.0, row);
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb))?;
                }
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c))?,
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(out, |d, y| d * (1.0 - y * y))?)?,
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |d, y| d * y * (1.0 - y))?)?
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |d, y| d * y)?)?,
            Op::Log(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |d, a| d / a)?)?
            }
            Op::Abs(x) => self.accumulate(
                grads,
                *x,
                g.zip_map(self.value(*x), |d, a| if a > 0.0 {
                    d
                } else if a < 0.0 {
                    -d
                } else {
                    0.0
                })?,
            )?,
            Op::Maxout2(x, arg) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let data = gx.data_mut();
                for (&src, &d) in arg.iter().zip(g.data()) {
                    data[src] += d;
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), d))?;
            }
            Op::SumRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                let k = shape[1];
                let mut data = Vec::with_capacity(shape[0] * k);
                for &d in g.data() {
                    data.extend(std::iter::repeat_n(d, k));
                }
                self.accumulate(grads, *x, Tensor::new(shape, data)?)?;
            }
            Op::ScaleRows(x, w) => {
                let mut gx = g.clone();
                let c = gx.len() / w.len().max(1);
                for (row, &wi) in gx.data_mut().chunks_mut(c.max(1)).zip(w) {
                    row.iter_mut().for_each(|a| *a *= wi);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::SelectRows(x, idx) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let c = gx.cols();
                let data = gx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut data[i * c..(i + 1) * c], 1.0, g.row(r));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::BatchNorm(x, inv_sd) => {
                let (b, k) = out.dims2()?;
                let mut mean_g = vec![0.0; k];
                let mut mean_gy = vec![0.0; k];
                for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                    for j in 0..k {
                        mean_g[j] += grow[j];
                        mean_gy[j] += grow[j] * yrow[j];
                    }
                }
                let bf = b as f64;
                mean_g.iter_mut().for_each(|v| *v /= bf);
                mean_gy.iter_mut().for_each(|v| *v /= bf);
                let mut gx = Vec::with_capacity(b * k);
                for (grow, yrow) in g.data().chunks(k).zip(out.data().chunks(k)) {
                    for j in 0..k {
                        gx.push((grow[j] - mean_g[j] - yrow[j] * mean_gy[j]) * inv_sd[j]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, k], gx)?)?;
            }
            Op::SoftmaxCrossEntropy(x, local) | Op::BinaryCrossEntropy(x, local) => {
                let mut gx = local.clone();
                let c = gx.cols();
                for (row, &d) in gx.data_mut().chunks_mut(c.max(1)).zip(g.data()) {
                    row.iter_mut().for_each(|a| *a *= d);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::GenerativeError(mean, log_sd, family) => {
                let m = self.value(*mean);
                let s = self.value(*log_sd);
                let (b, l) = m.dims2()?;
                let mut gm = Vec::with_capacity(b * l);
                let mut gs = Vec::with_capacity(b * l);
                for i in 0..b {
                    let d = g.data()[i];
                    for j in 0..l {
                        let (_, dm, ds) = standardized_kl_with_grad(*family, m.get2(i, j), s.get2(i, j));
                        gm.push(d * dm);
                        gs.push(d * ds);
                    }
                }
                self.accumulate(grads, *mean, Tensor::new(vec![b, l], gm)?)?;
                self.accumulate(grads, *log_sd, Tensor::new(vec![b, l], gs)?)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Abs(..) => "abs",
        Op::Maxout2(..) => "maxout2",
        Op::Sum(..) => "sum",
        Op::SumRows(..) => "sum_rows",
        Op::ScaleRows(..) => "scale_rows",
        Op::SelectRows(..) => "select_rows",
        Op::Transpose(..) => "transpose",
        Op::BatchNorm(..) => "batchnorm",
        Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        Op::BinaryCrossEntropy(..) => "binary_cross_entropy",
        Op::GenerativeError(..) => "generative_error",
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    let mut out = Vec::with_capacity(b * c);
    for row in logits.data().chunks(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![b, c], out)
}

/// Elementwise logistic function.
pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}
