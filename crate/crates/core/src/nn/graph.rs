//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op reads nodes that
//! already exist, so insertion order is a topological order and the backward
//! pass simply walks the list in reverse. Parameters enter the graph as leaf
//! copies of [`ParamStore`] entries; [`Graph::backward_into`] routes the leaf
//! gradients back into the store.
//!
//! The op set is deliberately narrow: exactly what the embedder, the
//! conditional generator, the proxy losses and unrolled Sinkhorn need.

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    /// `x · wᵀ + b`
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// `a · bᵀ`
    MatMulT {
        a: Var,
        b: Var,
    },
    Relu(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Per-column standardization. With `batch_stats` the mean and variance
    /// come from the batch itself and the backward pass differentiates
    /// through them; otherwise they are constants.
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// `gamma[label] ⊙ x + beta[label]`, row by row.
    CondAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        labels: Vec<usize>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    ScaleRows {
        x: Var,
        scales: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    /// `log(1 + Σ_i mask_ik · exp(z_ik))` per column k.
    Log1pSumExpCols {
        z: Var,
        mask: Vec<bool>,
    },
    /// `log Σ_k mask_ik · exp(z_ik)` per row i.
    LogSumExpRows {
        z: Var,
        mask: Vec<bool>,
    },
    /// Entropic c-transform over columns: `out_i = −ε·LSE_j((pot_j − C_ij)/ε + log_w)`.
    /// `weights` caches the row-softmax used by the backward pass.
    SoftminRows {
        cost: Var,
        pot: Var,
        weights: Vec<f64>,
    },
    /// Entropic c-transform over rows: `out_j = −ε·LSE_i((pot_i − C_ij)/ε + log_w)`.
    SoftminCols {
        cost: Var,
        pot: Var,
        weights: Vec<f64>,
    },
    /// `Σ_ij K_ij·C_ij` with `K_ij = exp((f_i + g_j − C_ij)/ε + log_ab)`.
    PlanCost {
        cost: Var,
        f: Var,
        g: Var,
        eps: f64,
        plan: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode computation graph. Rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no
    /// differentiable path connects them.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-leaf gradient to the matching store tensor.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_deref()) {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Every input of every node precedes it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| inputs(&n.op).iter().all(|v| v.0 < i))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf { .. } => value.requires_grad(),
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let value = value.with_requires_grad(false);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t.with_requires_grad(false))
    }

    /// Leaf copy of a store entry, wired back to it by [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
        value.set_requires_grad(t.requires_grad());
        self.push(Op::Leaf { param: Some(id) }, value)
    }

    /// Constant copy of `v`: downstream gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if !xt.is_matrix() || !wt.is_matrix() || xt.cols() != wt.cols() {
            return Err(Error::dim("linear", shape_str(wt), shape_str(xt)));
        }
        let (batch, inp, out) = (xt.rows(), xt.cols(), wt.rows());
        if bt.numel() != out {
            return Err(Error::dim("linear bias", out, bt.numel()));
        }
        let mut y = vec![0.0; batch * out];
        for i in 0..batch {
            let xr = &xt.data()[i * inp..(i + 1) * inp];
            for o in 0..out {
                let wr = &wt.data()[o * inp..(o + 1) * inp];
                y[i * out + o] = dot(xr, wr) + bt.data()[o];
            }
        }
        let value = Tensor::matrix(batch, out, y)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.is_matrix() || !bt.is_matrix() || at.cols() != bt.cols() {
            return Err(Error::dim("matmul_t", shape_str(at), shape_str(bt)));
        }
        let (n, m, k) = (at.rows(), bt.rows(), at.cols());
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let ar = &at.data()[i * k..(i + 1) * k];
            for j in 0..m {
                y[i * m + j] = dot(ar, &bt.data()[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::matrix(n, m, y)?;
        Ok(self.push(Op::MatMulT { a, b }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below `1e-12`
    /// are rejected rather than divided.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        let mut norms = Vec::with_capacity(n);
        let mut y = xt.data().to_vec();
        for i in 0..n {
            let row = &mut y[i * d..(i + 1) * d];
            let norm = dot(row, row).sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {norm:e}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        Ok(self.push(Op::L2NormalizeRows { x, norms }, value))
    }

    /// Batch standardization: returns the normalized activations together
    /// with the batch mean and biased variance per column.
    pub fn standardize_batch(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        if n < 2 {
            return Err(Error::BatchSize {
                op: "batch normalization",
                min: 2,
                got: n,
            });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xt.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xt.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut y = xt.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] = (y[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        let out = self.push(
            Op::Standardize {
                x,
                inv_std,
                batch_stats: true,
            },
            value,
        );
        Ok((out, mean, var))
    }

    /// Standardization with fixed statistics (inference mode).
    pub fn standardize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        if mean.len() != d || var.len() != d {
            return Err(Error::dim("standardize_fixed", d, mean.len()));
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut y = xt.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] = (y[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        Ok(self.push(
            Op::Standardize {
                x,
                inv_std,
                batch_stats: false,
            },
            value,
        ))
    }

    pub fn cond_affine(&mut self, x: Var, gamma: Var, beta: Var, labels: &[usize]) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = (xt.rows(), xt.cols());
        if labels.len() != n {
            return Err(Error::dim("cond_affine labels", n, labels.len()));
        }
        if gt.shape() != bt.shape() || gt.cols() != d {
            return Err(Error::dim("cond_affine tables", d, gt.cols()));
        }
        let classes = gt.rows();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label: bad, classes });
        }
        let mut y = vec![0.0; n * d];
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..d {
                y[i * d + j] = gt.row(l)[j] * xt.row(i)[j] + bt.row(l)[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        Ok(self.push(
            Op::CondAffine {
                x,
                gamma,
                beta,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// `scale·x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(Op::Affine { x, scale }, value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::dim(name, shape_str(at), shape_str(bt)));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.push(Op::Log(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// `Σ w_i·x_i` with constant weights; masked means are built from this.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if weights.len() != xt.numel() {
            return Err(Error::dim("weighted_sum", xt.numel(), weights.len()));
        }
        let s = dot(xt.data(), &weights);
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s)))
    }

    pub fn scale_rows(&mut self, x: Var, scales: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        if scales.len() != n {
            return Err(Error::dim("scale_rows", n, scales.len()));
        }
        let mut y = xt.data().to_vec();
        for i in 0..n {
            y[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= scales[i]);
        }
        let value = Tensor::new(xt.shape().to_vec(), y)?;
        Ok(self.push(Op::ScaleRows { x, scales }, value))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let (n, d) = (xt.rows(), xt.cols());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows index", n, bad));
        }
        let mut y = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| y.extend_from_slice(xt.row(i)));
        let mut shape = xt.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, y)?;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, value))
    }

    /// Picks `x[i, idx[i]]` for every row.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let (n, k) = (xt.rows(), xt.cols());
        if idx.len() != n {
            return Err(Error::dim("gather_cols", n, idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Error::dim("gather_cols index", k, bad));
        }
        let y = idx.iter().enumerate().map(|(i, &j)| xt.data()[i * k + j]).collect();
        let value = Tensor::vector(y)?;
        Ok(self.push(Op::GatherCols { x, idx: idx.to_vec() }, value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail_shape = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut y = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail_shape[..] {
                return Err(Error::dim("concat_rows", format!("{tail_shape:?}"), shape_str(t)));
            }
            rows += t.rows();
            y.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail_shape);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn log1p_sum_exp_cols(&mut self, z: Var, mask: Vec<bool>) -> Result<Var> {
        let zt = self.value(z);
        let (n, k) = (zt.rows(), zt.cols());
        if mask.len() != n * k {
            return Err(Error::dim("log1p_sum_exp_cols mask", n * k, mask.len()));
        }
        let mut out = vec![0.0; k];
        for (c, o) in out.iter_mut().enumerate() {
            let mut m: f64 = 0.0;
            for i in 0..n {
                if mask[i * k + c] {
                    m = m.max(zt.data()[i * k + c]);
                }
            }
            let mut t = 0.0;
            for i in 0..n {
                if mask[i * k + c] {
                    t += (zt.data()[i * k + c] - m).exp();
                }
            }
            // m == 0 keeps full precision when every exponent is very negative
            *o = if m == 0.0 { t.ln_1p() } else { m + ((-m).exp() + t).ln() };
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(Op::Log1pSumExpCols { z, mask }, value))
    }

    pub fn logsumexp_rows(&mut self, z: Var, mask: Vec<bool>) -> Result<Var> {
        let zt = self.value(z);
        let (n, k) = (zt.rows(), zt.cols());
        if mask.len() != n * k {
            return Err(Error::dim("logsumexp_rows mask", n * k, mask.len()));
        }
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &zt.data()[i * k..(i + 1) * k];
            let live = &mask[i * k..(i + 1) * k];
            let m = row
                .iter()
                .zip(live)
                .filter(|(_, &l)| l)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("logsumexp over empty mask in row {i}")));
            }
            let s: f64 = row
                .iter()
                .zip(live)
                .filter(|(_, &l)| l)
                .map(|(&v, _)| (v - m).exp())
                .sum();
            *o = m + s.ln();
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(Op::LogSumExpRows { z, mask }, value))
    }

    /// Row-wise entropic c-transform used by log-domain Sinkhorn.
    pub fn softmin_rows(&mut self, cost: Var, pot: Var, eps: f64, log_w: f64) -> Result<Var> {
        let (ct, pt) = (self.value(cost), self.value(pot));
        let (n, m) = (ct.rows(), ct.cols());
        if pt.numel() != m {
            return Err(Error::dim("softmin_rows", m, pt.numel()));
        }
        let keep = self.requires_grad(cost) || self.requires_grad(pot);
        let mut weights = if keep { vec![0.0; n * m] } else { Vec::new() };
        let mut out = vec![0.0; n];
        let mut buf = vec![0.0; m];
        for i in 0..n {
            let row = &ct.data()[i * m..(i + 1) * m];
            for j in 0..m {
                buf[j] = (pt.data()[j] - row[j]) / eps;
            }
            let mx = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            out[i] = -eps * (lse + log_w);
            if keep {
                for j in 0..m {
                    weights[i * m + j] = (buf[j] - lse).exp();
                }
            }
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(Op::SoftminRows { cost, pot, weights }, value))
    }

    /// Column-wise entropic c-transform used by log-domain Sinkhorn.
    pub fn softmin_cols(&mut self, cost: Var, pot: Var, eps: f64, log_w: f64) -> Result<Var> {
        let (ct, pt) = (self.value(cost), self.value(pot));
        let (n, m) = (ct.rows(), ct.cols());
        if pt.numel() != n {
            return Err(Error::dim("softmin_cols", n, pt.numel()));
        }
        let keep = self.requires_grad(cost) || self.requires_grad(pot);
        let mut weights = if keep { vec![0.0; n * m] } else { Vec::new() };
        let mut out = vec![0.0; m];
        let mut buf = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                buf[i] = (pt.data()[i] - ct.data()[i * m + j]) / eps;
            }
            let mx = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            out[j] = -eps * (lse + log_w);
            if keep {
                for i in 0..n {
                    weights[i * m + j] = (buf[i] - lse).exp();
                }
            }
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(Op::SoftminCols { cost, pot, weights }, value))
    }

    /// Transport cost `⟨K, C⟩` of the plan induced by dual potentials.
    /// Returns the scalar node and the plan entries (row-major).
    pub fn plan_cost(&mut self, cost: Var, f: Var, g: Var, eps: f64, log_ab: f64) -> Result<(Var, Vec<f64>)> {
        let (ct, ft, gt) = (self.value(cost), self.value(f), self.value(g));
        let (n, m) = (ct.rows(), ct.cols());
        if ft.numel() != n || gt.numel() != m {
            return Err(Error::dim(
                "plan_cost",
                format!("{n}+{m}"),
                format!("{}+{}", ft.numel(), gt.numel()),
            ));
        }
        let mut plan = vec![0.0; n * m];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..m {
                let c = ct.data()[i * m + j];
                let k = ((ft.data()[i] + gt.data()[j] - c) / eps + log_ab).exp();
                plan[i * m + j] = k;
                total += k * c;
            }
        }
        let out = self.push(
            Op::PlanCost {
                cost,
                f,
                g,
                eps,
                plan: plan.clone(),
            },
            Tensor::scalar(total),
        );
        Ok((out, plan))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that also accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store)?;
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (batch, inp, out) = (xt.rows(), xt.cols(), wt.rows());
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; batch * inp];
                    for r in 0..batch {
                        for o in 0..out {
                            let go = gout[r * out + o];
                            let wr = &wt.data()[o * inp..(o + 1) * inp];
                            for (a, wv) in gx[r * inp..(r + 1) * inp].iter_mut().zip(wr) {
                                *a += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; out * inp];
                    for r in 0..batch {
                        let xr = &xt.data()[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = gout[r * out + o];
                            for (a, xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                                *a += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; out];
                    for r in 0..batch {
                        for o in 0..out {
                            gb[o] += gout[r * out + o];
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (n, m, k) = (at.rows(), bt.rows(), at.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..m {
                            let go = gout[r * m + c];
                            for (acc, bv) in ga[r * k..(r + 1) * k].iter_mut().zip(&bt.data()[c * k..(c + 1) * k]) {
                                *acc += go * bv;
                            }
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; m * k];
                    for r in 0..n {
                        let ar = &at.data()[r * k..(r + 1) * k];
                        for c in 0..m {
                            let go = gout[r * m + c];
                            for (acc, av) in gb[c * k..(c + 1) * k].iter_mut().zip(ar) {
                                *acc += go * av;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let xt = self.value(*x);
                let g = xt
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.cols();
                let mut g = vec![0.0; y.numel()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gout[r * d..(r + 1) * d];
                    let proj = dot(yr, gr);
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Standardize {
                x,
                inv_std,
                batch_stats,
            } => {
                let y = &node.value;
                let (n, d) = (y.rows(), y.cols());
                let mut g = vec![0.0; n * d];
                if *batch_stats {
                    let nf = n as f64;
                    for j in 0..d {
                        let mut sg = 0.0;
                        let mut sgy = 0.0;
                        for r in 0..n {
                            sg += gout[r * d + j];
                            sgy += gout[r * d + j] * y.data()[r * d + j];
                        }
                        for r in 0..n {
                            g[r * d + j] = inv_std[j] / nf * (nf * gout[r * d + j] - sg - y.data()[r * d + j] * sgy);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..d {
                            g[r * d + j] = gout[r * d + j] * inv_std[j];
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::CondAffine { x, gamma, beta, labels } => {
                let (xt, gt) = (self.value(*x), self.value(*gamma));
                let d = xt.cols();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; xt.numel()];
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] = gout[r * d + j] * gt.row(l)[j];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*gamma) {
                    let mut gg = vec![0.0; gt.numel()];
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..d {
                            gg[l * d + j] += gout[r * d + j] * xt.row(r)[j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.requires_grad(*beta) {
                    let mut gb = vec![0.0; gt.numel()];
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..d {
                            gb[l * d + j] += gout[r * d + j];
                        }
                    }
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, gout.iter().map(|g| g * scale).collect());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.iter().zip(bt.data()).map(|(g, v)| g * v).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gout.iter().zip(at.data()).map(|(g, v)| g * v).collect());
                }
            }
            Op::Exp(x) => {
                let g = gout.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = gout.iter().zip(self.value(*x).data()).map(|(g, v)| g / v).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gout[0]; n]);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|w| w * gout[0]).collect());
            }
            Op::ScaleRows { x, scales } => {
                let d = node.value.cols();
                let g = gout.iter().enumerate().map(|(k, g)| g * scales[k / d]).collect();
                self.accumulate(grads, *x, g);
            }
            Op::GatherRows { x, idx } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let mut g = vec![0.0; xt.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        g[src * d + j] += gout[r * d + j];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::GatherCols { x, idx } => {
                let xt = self.value(*x);
                let k = xt.cols();
                let mut g = vec![0.0; xt.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    g[r * k + c] += gout[r];
                }
                self.accumulate(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, gout[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Log1pSumExpCols { z, mask } => {
                let zt = self.value(*z);
                let k = zt.cols();
                let out = node.value.data();
                let g = zt
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        if mask[idx] {
                            let c = idx % k;
                            gout[c] * (v - out[c]).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *z, g);
            }
            Op::LogSumExpRows { z, mask } => {
                let zt = self.value(*z);
                let k = zt.cols();
                let out = node.value.data();
                let g = zt
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        if mask[idx] {
                            let r = idx / k;
                            gout[r] * (v - out[r]).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *z, g);
            }
            Op::SoftminRows { cost, pot, weights } => {
                let m = self.value(*pot).numel();
                let n = gout.len();
                if self.requires_grad(*cost) {
                    let g = weights.iter().enumerate().map(|(k, w)| gout[k / m] * w).collect();
                    self.accumulate(grads, *cost, g);
                }
                if self.requires_grad(*pot) {
                    let mut gp = vec![0.0; m];
                    for r in 0..n {
                        for j in 0..m {
                            gp[j] -= gout[r] * weights[r * m + j];
                        }
                    }
                    self.accumulate(grads, *pot, gp);
                }
            }
            Op::SoftminCols { cost, pot, weights } => {
                let n = self.value(*pot).numel();
                let m = gout.len();
                if self.requires_grad(*cost) {
                    let g = weights.iter().enumerate().map(|(k, w)| gout[k % m] * w).collect();
                    self.accumulate(grads, *cost, g);
                }
                if self.requires_grad(*pot) {
                    let mut gp = vec![0.0; n];
                    for r in 0..n {
                        for j in 0..m {
                            gp[r] -= gout[j] * weights[r * m + j];
                        }
                    }
                    self.accumulate(grads, *pot, gp);
                }
            }
            Op::PlanCost { cost, f, g, eps, plan } => {
                let ct = self.value(*cost);
                let (n, m) = (ct.rows(), ct.cols());
                let go = gout[0];
                if self.requires_grad(*cost) {
                    let gc = plan
                        .iter()
                        .zip(ct.data())
                        .map(|(k, c)| go * (k - k * c / eps))
                        .collect();
                    self.accumulate(grads, *cost, gc);
                }
                let mut gf = vec![0.0; n];
                let mut gg = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let t = go * plan[r * m + c] * ct.data()[r * m + c] / eps;
                        gf[r] += t;
                        gg[c] += t;
                    }
                }
                self.accumulate(grads, *f, gf);
                self.accumulate(grads, *g, gg);
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::MatMulT { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Relu(x) | Op::Exp(x) | Op::Log(x) | Op::Sum(x) => vec![*x],
        Op::L2NormalizeRows { x, .. }
        | Op::Standardize { x, .. }
        | Op::Affine { x, .. }
        | Op::WeightedSum { x, .. }
        | Op::ScaleRows { x, .. }
        | Op::GatherRows { x, .. }
        | Op::GatherCols { x, .. } => vec![*x],
        Op::CondAffine { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::ConcatRows(parts) => parts.clone(),
        Op::Log1pSumExpCols { z, .. } | Op::LogSumExpRows { z, .. } => vec![*z],
        Op::SoftminRows { cost, pot, .. } | Op::SoftminCols { cost, pot, .. } => vec![*cost, *pot],
        Op::PlanCost { cost, f, g, .. } => vec![*cost, *f, *g],
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Gradient check of a unary graph function over random points.
    fn check_unary(shape: &[usize], trials: usize, tol: f64, build: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for t in 0..trials {
            let point = rand_tensor(&mut rng, shape).into_data();
            let f = |p: &[f64]| {
                let mut g = Graph::new();
                let x = g.input(Tensor::new(shape.to_vec(), p.to_vec())?.with_requires_grad(true));
                let y = build(&mut g, x)?;
                let grads = g.backward(y)?;
                Ok((
                    g.value(y).item(),
                    grads.get(x).map_or(vec![0.0; p.len()], <[f64]>::to_vec),
                ))
            };
            let err = grad_check(f, &point, 1e-5).unwrap();
            assert!(err <= tol, "trial {t}: rel err {err}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 2]).with_requires_grad(true));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_gradient_is_the_other_operand() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
        let y = g.input(Tensor::vector(vec![-4.0, 5.0, 0.5]).unwrap().with_requires_grad(true));
        let d = g.dot(x, y).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[-4.0, 5.0, 0.5]);
        assert_eq!(grads.get(y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_and_zeroing_resets() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap().with_requires_grad(true))
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        let once = store.get(id).grad().unwrap().to_vec();
        assert_eq!(once, vec![2.0, -4.0]);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[4.0, -8.0]);
        store.zero_grad();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), once.as_slice());
        assert!(g.is_topologically_ordered());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![2.0]).unwrap().with_requires_grad(true));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.6, 0.8]).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.6, 0.8]);
        let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 1e-13]).unwrap());
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn l2_normalize_gradient_is_projected() {
        // grad = (I − x̂x̂ᵀ)/‖x‖ · upstream
        let mut g = Graph::new();
        let xv = vec![1.0, 2.0, 2.0];
        let x = g.input(Tensor::matrix(1, 3, xv.clone()).unwrap().with_requires_grad(true));
        let y = g.l2_normalize_rows(x).unwrap();
        let up = vec![0.5, -1.0, 2.0];
        let loss = g.weighted_sum(y, up.clone()).unwrap();
        let grads = g.backward(loss).unwrap();
        let xh: Vec<f64> = xv.iter().map(|v| v / 3.0).collect();
        let proj: f64 = xh.iter().zip(&up).map(|(a, b)| a * b).sum();
        for j in 0..3 {
            let expect = (up[j] - xh[j] * proj) / 3.0;
            assert!((grads.get(x).unwrap()[j] - expect).abs() < 1e-15);
        }
        check_unary(&[4, 3], 100, 1e-4, |g, x| {
            let y = g.l2_normalize_rows(x)?;
            g.weighted_sum(y, (0..12).map(|k| (k as f64 * 0.37).sin()).collect())
        });
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        check_unary(&[3, 4], 30, 1e-6, |g, x| {
            let e = g.exp(x);
            let a = g.affine(e, 2.0, 1.0);
            let l = g.log(a);
            let m = g.mul(l, x)?;
            let s = g.sub(m, x)?;
            let r = g.relu(s);
            let w = g.scale_rows(r, vec![1.0, -2.0, 0.5])?;
            let c = g.concat_rows(&[w, x])?;
            let gr = g.gather_rows(c, &[0, 5, 5, 2])?;
            let gc = g.gather_cols(gr, &[1, 0, 3, 2])?;
            let t = g.sum(gc);
            let u = g.sum(w);
            g.add(t, u)
        });
    }

    #[test]
    fn masked_reductions_gradients() {
        let mask: Vec<bool> = (0..12).map(|k| k % 3 != 1).collect();
        let m2 = mask.clone();
        check_unary(&[3, 4], 50, 1e-6, move |g, x| {
            let z = g.scale(x, 5.0);
            let a = g.log1p_sum_exp_cols(z, m2.clone())?;
            let b = g.logsumexp_rows(z, m2.clone())?;
            let sa = g.weighted_sum(a, vec![1.0, 0.3, -0.7, 2.0])?;
            let sb = g.weighted_sum(b, vec![0.5, -1.0, 1.5])?;
            g.add(sa, sb)
        });
        // log(1 + e^{-28.8}) keeps full precision
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 1, vec![-28.8]).unwrap());
        let y = g.log1p_sum_exp_cols(z, vec![true]).unwrap();
        let v = g.value(y).item();
        assert!((v - (-28.8f64).exp()).abs() < 1e-25);
        assert!(v <= 1e-12);
    }

    #[test]
    fn matmul_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[2, 3]);
        let bias = rand_tensor(&mut rng, &[2]);
        check_unary(&[4, 3], 30, 1e-6, move |g, x| {
            let bv = g.constant(b.clone());
            let p = g.matmul_t(x, bv)?;
            let wv = g.constant(w.clone());
            let bb = g.constant(bias.clone());
            let l = g.linear(x, wv, bb)?;
            let s1 = g.weighted_sum(p, (0..20).map(|k| (k as f64).cos()).collect())?;
            let s2 = g.weighted_sum(l, (0..8).map(|k| (k as f64).sin()).collect())?;
            g.add(s1, s2)
        });
    }

    #[test]
    fn sinkhorn_primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pot = rand_tensor(&mut rng, &[4]);
        let pot_rows = rand_tensor(&mut rng, &[3]);
        check_unary(&[3, 4], 30, 1e-6, move |g, c| {
            let p = g.input(pot.clone().with_requires_grad(true));
            let f = g.softmin_rows(c, p, 0.3, -(4f64).ln())?;
            let q = g.input(pot_rows.clone().with_requires_grad(true));
            let h = g.softmin_cols(c, q, 0.3, -(3f64).ln())?;
            let (w, _) = g.plan_cost(c, f, h, 0.3, -(12f64).ln())?;
            Ok(w)
        });
    }
}
