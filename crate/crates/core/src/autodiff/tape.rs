//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape
//! is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use crate::autodiff::Tensor;
use crate::error::{config_err, Error, Result};
use crate::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Hadamard(Var, Var),
    /// `1 - x`
    Complement(Var),
    Add(Var, Var),
    /// `(x + offset) * factor`, offset is a constant of the same shape.
    ShiftScale {
        x: Var,
        factor: S,
    },
    StraightThrough(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    NegEntropy {
        logits: Var,
        probs: Vec<S>,
        log_probs: Vec<S>,
    },
    SymmetricKl {
        a: Var,
        b: Var,
        pa: Vec<S>,
        pb: Vec<S>,
        la: Vec<S>,
        lb: Vec<S>,
    },
    WeightedSum(Vec<(Var, S)>),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance of the batch.
    pub var: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
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

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`; zeros when `v` was unreachable.
    pub fn grad(&self, v: Var) -> Vec<S> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| vec![S::zero(); node.value.len()])
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Training(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(config_err(format!("{what} must be 2-D, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `x W + b` for `x: [B, n]`, `W: [n, k]`, `b: [k]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, n) = self.matrix_dims(x, "affine input")?;
        let (wn, k) = self.matrix_dims(w, "affine weight")?;
        if wn != n {
            return Err(config_err(format!("affine: input width {n} != weight rows {wn}")));
        }
        if self.value(b).len() != k {
            return Err(config_err(format!("affine: bias length {} != output width {k}", self.value(b).len())));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * k);
        for i in 0..rows {
            out.extend_from_slice(bv);
            let o = &mut out[i * k..(i + 1) * k];
            for t in 0..n {
                let a = xv[i * n + t];
                if a == S::zero() {
                    continue;
                }
                let wr = &wv[t * k..(t + 1) * k];
                for (oj, &wj) in o.iter_mut().zip(wr) {
                    *oj += a * wj;
                }
            }
        }
        let value = Tensor::new(vec![rows, k], out)?;
        self.push("affine", value, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax of a `[B, C]` array.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "softmax input")?;
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend(softmax_row(self.value(x).row(i)));
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("hadamard", value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn complement(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| S::one() - v);
        self.push("complement", value, Op::Complement(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `(x + offset) * factor` with a constant offset.
    pub fn shift_scale(&mut self, x: Var, offset: &[S], factor: S) -> Result<Var> {
        if offset.len() != self.value(x).len() {
            return Err(config_err("shift_scale: offset length mismatch"));
        }
        let data = self.value(x).data().iter().zip(offset).map(|(&v, &o)| (v + o) * factor).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push("shift_scale", value, Op::ShiftScale { x, factor }, &[x])
    }

    /// Emits 1 where `x >= threshold`, else 0. The backward pass hands the
    /// upstream gradient to `x` unchanged.
    pub fn hard_threshold_ste(&mut self, x: Var, threshold: S) -> Result<Var> {
        let value = self.value(x).map(|v| if v >= threshold { S::one() } else { S::zero() });
        self.push("hard_threshold_ste", value, Op::StraightThrough(x), &[x])
    }

    /// Train-mode batch normalization over the rows of `x: [B, k]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchMoments<S>)> {
        let (rows, cols) = self.matrix_dims(x, "batchnorm input")?;
        if rows < 2 {
            return Err(Error::Training(format!("batchnorm needs at least 2 rows in train mode, got {rows}")));
        }
        self.check_feature_len(gamma, cols, "gamma")?;
        self.check_feature_len(beta, cols, "beta")?;
        let xv = self.value(x).data();
        let n = S::from_usize_lossy(rows);
        let mut mean = vec![S::zero(); cols];
        for i in 0..rows {
            for j in 0..cols {
                mean[j] += xv[i * cols + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![S::zero(); cols];
        for i in 0..rows {
            for j in 0..cols {
                let d = xv[i * cols + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (value, x_hat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let op = Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train: true };
        let out = self.push("batchnorm", value, op, &[x, gamma, beta])?;
        Ok((out, BatchMoments { mean, var }))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (_, cols) = self.matrix_dims(x, "batchnorm input")?;
        self.check_feature_len(gamma, cols, "gamma")?;
        self.check_feature_len(beta, cols, "beta")?;
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(config_err("batchnorm running statistics width mismatch"));
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (value, x_hat) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let op = Op::BatchNorm { x, gamma, beta, x_hat, inv_std, train: false };
        self.push("batchnorm", value, op, &[x, gamma, beta])
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[S], inv_std: &[S]) -> (Tensor<S>, Vec<S>) {
        let xt = self.value(x);
        let cols = xt.cols();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for (idx, &v) in xt.data().iter().enumerate() {
            let j = idx % cols;
            let h = (v - mean[j]) * inv_std[j];
            x_hat.push(h);
            out.push(g[j] * h + b[j]);
        }
        (Tensor::new(xt.shape().to_vec(), out).expect("shape preserved"), x_hat)
    }

    fn check_feature_len(&self, v: Var, cols: usize, what: &str) -> Result<()> {
        if self.value(v).len() != cols {
            return Err(config_err(format!("batchnorm {what} length {} != width {cols}", self.value(v).len())));
        }
        Ok(())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Batch-mean cross entropy between softmax(logits) and integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(logits, "cross_entropy logits")?;
        if labels.len() != rows {
            return Err(config_err(format!("cross_entropy: {} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!("label {bad} out of range for {cols} classes")));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let lp = log_softmax_row(self.value(logits).row(i));
            total -= lp[y];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let loss = total / S::from_usize_lossy(rows);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Batch mean of `sum_c p_c ln p_c` with `p = softmax(logits)`; lies in `[-ln C, 0]`.
    pub fn negative_entropy(&mut self, logits: Var) -> Result<Var> {
        let (rows, _) = self.matrix_dims(logits, "negative_entropy logits")?;
        let mut probs = Vec::new();
        let mut log_probs = Vec::new();
        let mut total = S::zero();
        for i in 0..rows {
            let lp = log_softmax_row(self.value(logits).row(i));
            for &l in &lp {
                let p = l.exp();
                total += p * l;
                probs.push(p);
                log_probs.push(l);
            }
        }
        let value = Tensor::scalar(total / S::from_usize_lossy(rows));
        self.push("negative_entropy", value, Op::NegEntropy { logits, probs, log_probs }, &[logits])
    }

    /// Batch mean of `KL(p || q) + KL(q || p)` with `p = softmax(a)`, `q = softmax(b)`.
    pub fn symmetric_kl(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "symmetric_kl")?;
        let (rows, _) = self.matrix_dims(a, "symmetric_kl logits")?;
        let (mut pa, mut pb, mut la, mut lb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut total = S::zero();
        for i in 0..rows {
            let lpa = log_softmax_row(self.value(a).row(i));
            let lpb = log_softmax_row(self.value(b).row(i));
            for (&x, &y) in lpa.iter().zip(&lpb) {
                let (p, q) = (x.exp(), y.exp());
                total += (p - q) * (x - y);
                pa.push(p);
                pb.push(q);
                la.push(x);
                lb.push(y);
            }
        }
        let value = Tensor::scalar(total / S::from_usize_lossy(rows));
        self.push("symmetric_kl", value, Op::SymmetricKl { a, b, pa, pb, la, lb }, &[a, b])
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        if terms.iter().any(|(v, _)| !self.value(*v).is_scalar()) {
            return Err(config_err("weighted_sum expects scalar terms"));
        }
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push("weighted_sum", Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(config_err(format!(
                "{what}: shape {:?} != {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Populates gradients of the scalar `loss` on every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else { continue };
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.propagate(idx, &upstream);
            }
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<S>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[S]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.apply_backward(idx, &op, dy);
        self.nodes[idx].op = op;
    }

    fn apply_backward(&mut self, idx: usize, op: &Op<S>, dy: &[S]) {
        let out = &self.nodes[idx].value;
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, n) = (self.value(x).rows(), self.value(x).cols());
                let k = self.value(w).cols();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dx = vec![S::zero(); rows * n];
                let mut dw = vec![S::zero(); n * k];
                let mut db = vec![S::zero(); k];
                for i in 0..rows {
                    let dyr = &dy[i * k..(i + 1) * k];
                    for (dbj, &g) in db.iter_mut().zip(dyr) {
                        *dbj += g;
                    }
                    for t in 0..n {
                        let wr = &wv[t * k..(t + 1) * k];
                        dx[i * n + t] = wr.iter().zip(dyr).map(|(&a, &g)| a * g).sum();
                        let a = xv[i * n + t];
                        for (dwj, &g) in dw[t * k..(t + 1) * k].iter_mut().zip(dyr) {
                            *dwj += a * g;
                        }
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.data().iter().zip(dy).map(|(&s, &g)| g * s * (S::one() - s)).collect();
                self.accumulate(x, dx);
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let mut dx = Vec::with_capacity(dy.len());
                for (p, g) in out.data().chunks(cols).zip(dy.chunks(cols)) {
                    let dot: S = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dx.extend(p.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
                }
                self.accumulate(x, dx);
            }
            Op::Hadamard(a, b) => {
                let da = dy.iter().zip(self.value(b).data()).map(|(&g, &v)| g * v).collect();
                let db = dy.iter().zip(self.value(a).data()).map(|(&g, &v)| g * v).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Complement(x) => self.accumulate(x, dy.iter().map(|&g| -g).collect()),
            Op::Add(a, b) => {
                self.accumulate(a, dy.to_vec());
                self.accumulate(b, dy.to_vec());
            }
            Op::ShiftScale { x, factor } => self.accumulate(x, dy.iter().map(|&g| g * factor).collect()),
            Op::StraightThrough(x) => self.accumulate(x, dy.to_vec()),
            Op::BatchNorm { x, gamma, beta, ref x_hat, ref inv_std, train } => {
                let cols = inv_std.len();
                let rows = dy.len() / cols;
                let g = self.value(gamma).data();
                let mut dgamma = vec![S::zero(); cols];
                let mut dbeta = vec![S::zero(); cols];
                for (idx, (&d, &h)) in dy.iter().zip(x_hat).enumerate() {
                    dgamma[idx % cols] += d * h;
                    dbeta[idx % cols] += d;
                }
                let dx: Vec<S> = if train {
                    let n = S::from_usize_lossy(rows);
                    dy.iter()
                        .zip(x_hat)
                        .enumerate()
                        .map(|(idx, (&d, &h))| {
                            let j = idx % cols;
                            g[j] * inv_std[j] / n * (n * d - dbeta[j] - h * dgamma[j])
                        })
                        .collect()
                } else {
                    dy.iter().enumerate().map(|(idx, &d)| d * g[idx % cols] * inv_std[idx % cols]).collect()
                };
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![dy[0]; n]);
            }
            Op::CrossEntropy { logits, ref labels, ref probs } => {
                let cols = probs.len() / labels.len();
                let scale = dy[0] / S::from_usize_lossy(labels.len());
                let mut dx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * cols + y] -= scale;
                }
                self.accumulate(logits, dx);
            }
            Op::NegEntropy { logits, ref probs, ref log_probs } => {
                let cols = self.value(logits).cols();
                let rows = probs.len() / cols;
                let scale = dy[0] / S::from_usize_lossy(rows);
                let mut dx = Vec::with_capacity(probs.len());
                for (p, l) in probs.chunks(cols).zip(log_probs.chunks(cols)) {
                    let h: S = p.iter().zip(l).map(|(&a, &b)| a * b).sum();
                    dx.extend(p.iter().zip(l).map(|(&a, &b)| scale * a * (b - h)));
                }
                self.accumulate(logits, dx);
            }
            Op::SymmetricKl { a, b, ref pa, ref pb, ref la, ref lb } => {
                let cols = self.value(a).cols();
                let rows = pa.len() / cols;
                let scale = dy[0] / S::from_usize_lossy(rows);
                let mut da = Vec::with_capacity(pa.len());
                let mut db = Vec::with_capacity(pa.len());
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let (p, q, lp, lq) = (&pa[s.clone()], &pb[s.clone()], &la[s.clone()], &lb[s]);
                    let kl_pq: S = (0..cols).map(|c| p[c] * (lp[c] - lq[c])).sum();
                    let kl_qp: S = (0..cols).map(|c| q[c] * (lq[c] - lp[c])).sum();
                    for c in 0..cols {
                        da.push(scale * (p[c] * (lp[c] - lq[c] - kl_pq) + p[c] - q[c]));
                        db.push(scale * (q[c] * (lq[c] - lp[c] - kl_qp) + q[c] - p[c]));
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::WeightedSum(ref terms) => {
                for &(v, w) in terms {
                    self.accumulate(v, vec![dy[0] * w]);
                }
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    row.iter().map(|&v| v - lse).collect()
}
