//! Proxy-based metric losses over (possibly mixed real/synthetic) batches.
//!
//! All three losses work on the cosine similarity matrix `S = X · P̂ᵀ`
//! between unit embeddings and proxies normalized at the point of use:
//!
//! * Proxy-Anchor:
//!   `1/|P⁺| Σ_{p∈P⁺} log(1 + Σ_{x∈X⁺_p} e^{−α(s−δ)}) + 1/|P| Σ_p log(1 + Σ_{x∈X⁻_p} e^{α(s+δ)})`
//! * Proxy-NCA: `mean_x [ log Σ_{p≠p_y} e^{s/T} − s_y/T ]`
//! * NormSoftmax: `mean_x [ log Σ_p e^{s/T} − s_y/T ]`

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::graph::dot;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::ot::cost::check_unit_rows;

/// Unit-norm embeddings with class labels. May be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    dim: usize,
    data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(vectors: &Tensor, labels: Vec<usize>) -> Result<Self> {
        if !vectors.is_matrix() {
            return Err(Error::dim("EmbeddingBatch", "2-d", format!("{:?}", vectors.shape())));
        }
        if labels.len() != vectors.rows() {
            return Err(Error::dim("EmbeddingBatch labels", vectors.rows(), labels.len()));
        }
        check_unit_rows(vectors, "embedding")?;
        Ok(EmbeddingBatch {
            dim: vectors.cols(),
            data: vectors.data().to_vec(),
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingBatch {
            dim,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The vectors as a `len × dim` matrix; fails on an empty batch.
    pub fn tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Contract("empty embedding batch".into()));
        }
        Tensor::matrix(self.len(), self.dim, self.data.clone())
    }
}

/// Whether synthetic labels may share the real label range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnionMode {
    /// Synthetic classes are new (novel classes, Proxy Synthesis).
    Disjoint,
    /// Synthetic vectors belong to existing classes (L2A-EC).
    ExistingClasses,
}

fn check_union(real: &[usize], synthetic: &[usize], mode: UnionMode) -> Result<()> {
    if mode == UnionMode::ExistingClasses || real.is_empty() || synthetic.is_empty() {
        return Ok(());
    }
    let span = |l: &[usize]| (*l.iter().min().unwrap(), *l.iter().max().unwrap());
    let (rlo, rhi) = span(real);
    let (slo, shi) = span(synthetic);
    if rlo <= shi && slo <= rhi {
        return Err(Error::Contract(format!(
            "label ranges overlap: real {rlo}..={rhi}, synthetic {slo}..={shi}"
        )));
    }
    Ok(())
}

/// Concatenation `X ∪ X̃` with real rows first.
pub fn union_batch(real: &EmbeddingBatch, synthetic: &EmbeddingBatch, mode: UnionMode) -> Result<EmbeddingBatch> {
    if synthetic.is_empty() {
        return Ok(real.clone());
    }
    if real.dim != synthetic.dim {
        return Err(Error::dim("union_batch", real.dim, synthetic.dim));
    }
    check_union(&real.labels, &synthetic.labels, mode)?;
    let mut data = real.data.clone();
    data.extend_from_slice(&synthetic.data);
    let mut labels = real.labels.clone();
    labels.extend_from_slice(&synthetic.labels);
    Ok(EmbeddingBatch {
        dim: real.dim,
        data,
        labels,
    })
}

/// Graph-side counterpart of [`union_batch`].
pub fn union_vars(
    g: &mut Graph,
    real: (Var, &[usize]),
    synthetic: Option<(Var, &[usize])>,
    mode: UnionMode,
) -> Result<(Var, Vec<usize>)> {
    let Some((xs, ls)) = synthetic else {
        return Ok((real.0, real.1.to_vec()));
    };
    if g.value(real.0).cols() != g.value(xs).cols() {
        return Err(Error::dim("union_batch", g.value(real.0).cols(), g.value(xs).cols()));
    }
    check_union(real.1, ls, mode)?;
    let x = g.concat_rows(&[real.0, xs])?;
    let mut labels = real.1.to_vec();
    labels.extend_from_slice(ls);
    Ok((x, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    ProxyAnchor,
    ProxyNca,
    NormSoftmax,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::ProxyAnchor, LossKind::ProxyNca, LossKind::NormSoftmax];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::ProxyAnchor => "proxy_anchor",
            LossKind::ProxyNca => "proxy_nca",
            LossKind::NormSoftmax => "norm_softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        LossKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub kind: LossKind,
    /// Proxy-Anchor scale.
    pub alpha: f64,
    /// Proxy-Anchor margin.
    pub delta: f64,
    /// Logit temperature for Proxy-NCA and NormSoftmax.
    pub temperature: f64,
}

impl LossParams {
    pub fn proxy_anchor() -> Self {
        LossParams {
            kind: LossKind::ProxyAnchor,
            alpha: 32.0,
            delta: 0.1,
            temperature: 1.0,
        }
    }

    pub fn proxy_nca() -> Self {
        LossParams {
            kind: LossKind::ProxyNca,
            temperature: 1.0,
            ..Self::proxy_anchor()
        }
    }

    pub fn norm_softmax() -> Self {
        LossParams {
            kind: LossKind::NormSoftmax,
            temperature: 0.05,
            ..Self::proxy_anchor()
        }
    }

    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::ProxyAnchor => Self::proxy_anchor(),
            LossKind::ProxyNca => Self::proxy_nca(),
            LossKind::NormSoftmax => Self::norm_softmax(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Contract(format!("loss alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract(format!(
                "loss temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::Contract("loss delta must be finite".into()));
        }
        Ok(())
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self::proxy_anchor()
    }
}

/// Learnable proxies for the real classes (`P`) and, optionally, the novel
/// classes (`P̃`). Stored unnormalized; normalized whenever read.
///
/// Labels index the union: `0..real` are real classes and
/// `real..real + novel` are novel classes.
#[derive(Clone, Debug)]
pub struct ProxyBank {
    pub real: ParamId,
    pub novel: Option<ParamId>,
    pub real_classes: usize,
    pub novel_classes: usize,
    pub dim: usize,
}

/// Which part of a [`ProxyBank`] a loss sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxySet {
    Real,
    Novel,
    All,
}

fn unit_gaussian_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&v, &v).sqrt();
        out.extend(v.into_iter().map(|x| x / norm));
    }
    out
}

impl ProxyBank {
    /// Proxies drawn uniformly on the unit sphere.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        real_classes: usize,
        novel_classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if real_classes == 0 || dim == 0 {
            return Err(Error::Contract(
                "proxy bank needs at least one real class and dim > 0".into(),
            ));
        }
        let real = store.insert(
            "proxies.real",
            Tensor::matrix(real_classes, dim, unit_gaussian_rows(rng, real_classes, dim))?.with_requires_grad(true),
        )?;
        let novel = if novel_classes > 0 {
            Some(
                store.insert(
                    "proxies.novel",
                    Tensor::matrix(novel_classes, dim, unit_gaussian_rows(rng, novel_classes, dim))?
                        .with_requires_grad(true),
                )?,
            )
        } else {
            None
        };
        Ok(ProxyBank {
            real,
            novel,
            real_classes,
            novel_classes,
            dim,
        })
    }

    pub fn total_classes(&self) -> usize {
        self.real_classes + self.novel_classes
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.real];
        v.extend(self.novel);
        v
    }

    pub fn real_params(&self) -> Vec<ParamId> {
        vec![self.real]
    }

    pub fn novel_params(&self) -> Vec<ParamId> {
        self.novel.into_iter().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.total_classes() * self.dim
    }

    /// Raw proxy rows for `set` and the label offset of its first row.
    pub fn select(&self, g: &mut Graph, store: &ParamStore, set: ProxySet) -> Result<(Var, usize)> {
        let novel = |g: &mut Graph| {
            self.novel
                .map(|id| g.param(store, id))
                .ok_or_else(|| Error::Contract("proxy bank has no novel classes".into()))
        };
        match set {
            ProxySet::Real => Ok((g.param(store, self.real), 0)),
            ProxySet::Novel => Ok((novel(g)?, self.real_classes)),
            ProxySet::All => {
                let r = g.param(store, self.real);
                if self.novel.is_none() {
                    return Ok((r, 0));
                }
                let n = novel(g)?;
                Ok((g.concat_rows(&[r, n])?, 0))
            }
        }
    }

    /// Proxies normalized to unit rows, as plain values.
    pub fn normalized(&self, store: &ParamStore, set: ProxySet) -> Result<Tensor> {
        let mut g = Graph::new();
        let (p, _) = self.select(&mut g, store, set)?;
        let p = g.l2_normalize_rows(p)?;
        Ok(g.value(p).clone())
    }
}

/// Metric loss on a graph. `x` holds unit rows, `proxies` holds raw proxy
/// rows (normalized here) and `labels[i]` indexes a row of `proxies`.
pub fn j_met_var(g: &mut Graph, x: Var, labels: &[usize], proxies: Var, params: &LossParams) -> Result<Var> {
    params.validate()?;
    let (b, k) = (g.value(x).rows(), g.value(proxies).rows());
    if labels.is_empty() || b == 0 {
        return Err(Error::Contract("metric loss on an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::dim("j_met labels", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelRange { label: bad, classes: k });
    }
    check_unit_rows(g.value(x), "embedding")?;
    let p = g.l2_normalize_rows(proxies)?;
    let s = g.matmul_t(x, p)?;
    let positive: Vec<bool> = (0..b * k).map(|e| labels[e / k] == e % k).collect();
    let negative: Vec<bool> = positive.iter().map(|&v| !v).collect();

    match params.kind {
        LossKind::ProxyAnchor => {
            let (a, d) = (params.alpha, params.delta);
            let zp = g.affine(s, -a, a * d);
            let pos = g.log1p_sum_exp_cols(zp, positive)?;
            let zn = g.affine(s, a, a * d);
            let neg = g.log1p_sum_exp_cols(zn, negative)?;
            let mut with_pos = vec![false; k];
            labels.iter().for_each(|&l| with_pos[l] = true);
            let n_pos = with_pos.iter().filter(|&&v| v).count() as f64;
            let wp = with_pos.iter().map(|&v| if v { 1.0 / n_pos } else { 0.0 }).collect();
            let pos = g.weighted_sum(pos, wp)?;
            let neg = g.weighted_sum(neg, vec![1.0 / k as f64; k])?;
            g.add(pos, neg)
        }
        LossKind::ProxyNca | LossKind::NormSoftmax => {
            let z = g.scale(s, 1.0 / params.temperature);
            let mask = if params.kind == LossKind::ProxyNca {
                if k < 2 {
                    return Err(Error::Contract("Proxy-NCA needs at least two proxies".into()));
                }
                negative
            } else {
                vec![true; b * k]
            };
            let lse = g.logsumexp_rows(z, mask)?;
            let own = g.gather_cols(z, labels)?;
            let per = g.sub(lse, own)?;
            g.weighted_sum(per, vec![1.0 / b as f64; b])
        }
    }
}

/// Value of the metric loss for a batch against a proxy bank. Batch labels
/// index the union of real and novel classes.
pub fn j_met(batch: &EmbeddingBatch, bank: &ProxyBank, store: &ParamStore, params: &LossParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("metric loss on an empty batch".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(batch.tensor()?);
    let (p, _) = bank.select(&mut g, store, ProxySet::All)?;
    let l = j_met_var(&mut g, x, &batch.labels, p, params)?;
    Ok(g.value(l).item())
}
