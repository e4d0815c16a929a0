//! Embedding synthesis: the class-conditional generator and the Proxy
//! Synthesis interpolation baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::nn::graph::dot;
use crate::nn::{ConditionalBatchNorm, Graph, LinearLayer, Mode, ParamId, ParamStore, Tensor, Var};

pub const NOISE_DIM: usize = 16;

/// Seeded standard-normal noise, `NOISE_DIM` coordinates per row.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    pub dim: usize,
}

impl NoiseSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        NoiseSource { rng, dim: NOISE_DIM }
    }

    pub fn sample(&mut self, rows: usize) -> Result<Tensor> {
        let data = (0..rows * self.dim).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::matrix(rows, self.dim, data)
    }
}

/// Draws a `rows × NOISE_DIM` standard-normal matrix from any rng.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize) -> Result<Tensor> {
    let data = (0..rows * NOISE_DIM).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, NOISE_DIM, data)
}

/// `g(ỹ, z)`: four linear layers with class-conditional batch norm and ReLU
/// between consecutive layers, followed by row normalization.
///
/// Conditioning labels are local (`0..classes`); `label_offset` maps them
/// into the loss label space (the number of real classes for novel-class
/// generation, zero when the generator synthesizes existing classes).
#[derive(Clone, Debug)]
pub struct ConditionalGenerator {
    pub layers: Vec<LinearLayer>,
    pub norms: Vec<ConditionalBatchNorm>,
    pub classes: usize,
    pub label_offset: usize,
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ConditionalGenerator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        classes: usize,
        label_offset: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Contract("generator needs at least one class".into()));
        }
        let dims = [NOISE_DIM, hidden_dim, hidden_dim, hidden_dim, output_dim];
        let mut layers = Vec::with_capacity(4);
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(LinearLayer::new(store, &format!("gen.fc{i}"), w[0], w[1], rng)?);
        }
        let mut norms = Vec::with_capacity(3);
        for i in 0..3 {
            norms.push(ConditionalBatchNorm::new(
                store,
                &format!("gen.cbn{i}"),
                classes,
                hidden_dim,
            )?);
        }
        Ok(ConditionalGenerator {
            layers,
            norms,
            classes,
            label_offset,
            noise_dim: NOISE_DIM,
            hidden_dim,
            output_dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.layers.iter().flat_map(LinearLayer::params).collect();
        v.extend(self.norms.iter().flat_map(ConditionalBatchNorm::params));
        v
    }

    pub fn buffers(&self) -> Vec<ParamId> {
        self.norms.iter().flat_map(ConditionalBatchNorm::buffers).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::parameter_count).sum::<usize>()
            + self
                .norms
                .iter()
                .map(ConditionalBatchNorm::parameter_count)
                .sum::<usize>()
    }

    /// Records the forward pass on `g`. `labels` are local class ids.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        labels: &[usize],
        noise: Var,
        mode: Mode,
    ) -> Result<Var> {
        let nt = g.value(noise);
        if !nt.is_matrix() || nt.cols() != self.noise_dim {
            return Err(Error::dim(
                "generate noise",
                self.noise_dim,
                format!("{:?}", nt.shape()),
            ));
        }
        if labels.len() != nt.rows() {
            return Err(Error::dim("generate labels", nt.rows(), labels.len()));
        }
        if mode == Mode::Train && labels.len() < 2 {
            return Err(Error::BatchSize {
                op: "generate",
                min: 2,
                got: labels.len(),
            });
        }
        let mut h = noise;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if let Some(norm) = self.norms.get(i) {
                h = norm.forward(g, store, h, labels, mode)?;
                h = g.relu(h);
            }
        }
        g.l2_normalize_rows(h)
    }

    /// Synthetic batch `X̃ = g(Ỹ, Z)` with labels in loss label space.
    pub fn generate(
        &self,
        store: &mut ParamStore,
        labels: &[usize],
        noise: &Tensor,
        mode: Mode,
    ) -> Result<EmbeddingBatch> {
        let mut g = Graph::new();
        let z = g.constant(noise.clone());
        let x = self.forward(&mut g, store, labels, z, mode)?;
        let out = labels.iter().map(|l| l + self.label_offset).collect();
        EmbeddingBatch::new(g.value(x), out)
    }
}

/// Existing-class synthesis: the generator's universe must be the real
/// classes and the returned labels are real labels.
pub fn l2a_ec_generate(
    gen: &ConditionalGenerator,
    store: &mut ParamStore,
    real_labels: &[usize],
    noise: &Tensor,
    mode: Mode,
) -> Result<EmbeddingBatch> {
    if gen.label_offset != 0 {
        return Err(Error::Contract(
            "existing-class generation needs a generator over the real classes".into(),
        ));
    }
    gen.generate(store, real_labels, noise, mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsParams {
    /// Shape of the symmetric `Beta(α, α)` mixing distribution.
    pub alpha: f64,
    pub renormalize: bool,
}

impl Default for PsParams {
    fn default() -> Self {
        PsParams {
            alpha: 2.0,
            renormalize: true,
        }
    }
}

impl PsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Contract(format!(
                "PS alpha must be in (0, inf), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn sample_lambda<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let beta = Beta::new(self.alpha, self.alpha).map_err(|e| Error::Contract(e.to_string()))?;
        Ok(beta.sample(rng))
    }
}

/// One real sample with its class proxy.
#[derive(Clone, Copy, Debug)]
pub struct PsEndpoint<'a> {
    pub x: &'a [f64],
    pub p: &'a [f64],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsSample {
    pub proxy: Vec<f64>,
    pub x: Vec<f64>,
    pub lambda: f64,
}

fn mix(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("ps_synthesize", a.len(), b.len()));
    }
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    let n = dot(&v, &v).sqrt();
    if !(n >= 1e-12) {
        return Err(Error::Degenerate {
            op: "ps_synthesize",
            detail: format!("interpolant norm {n:e}"),
        });
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Interpolates proxy and embedding with the same fixed `lambda`.
pub fn ps_interpolate(a: PsEndpoint<'_>, b: PsEndpoint<'_>, lambda: f64) -> Result<PsSample> {
    if a.label == b.label {
        return Err(Error::Contract(format!(
            "proxy synthesis needs two different classes, got {} twice",
            a.label
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(PsSample {
        proxy: mix(a.p, b.p, lambda)?,
        x: mix(a.x, b.x, lambda)?,
        lambda,
    })
}

/// `(p̃, x̃) = (I_λ(p_i, p_j), I_λ(x_i, x_j))` with `λ ∼ Beta(α, α)` and
/// `I_λ(a, b) = λa + (1 − λ)b`, renormalized to the unit sphere.
pub fn ps_synthesize<R: Rng + ?Sized>(
    a: PsEndpoint<'_>,
    b: PsEndpoint<'_>,
    params: &PsParams,
    rng: &mut R,
) -> Result<PsSample> {
    let lambda = params.sample_lambda(rng)?;
    ps_interpolate(a, b, lambda)
}

/// Batch form of Proxy Synthesis on a graph. Rows of `x` and `proxies` are
/// unit vectors; pair `k` mixes rows `pairs[k].0` and `pairs[k].1` of `x`
/// (and the proxies of their labels) with weight `lambdas[k]`. Gradients
/// flow to both the embeddings and the proxies.
pub fn ps_batch_var(
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    proxies: Var,
    pairs: &[(usize, usize)],
    lambdas: &[f64],
) -> Result<(Var, Var)> {
    if pairs.len() != lambdas.len() || pairs.is_empty() {
        return Err(Error::dim("ps_batch", pairs.len(), lambdas.len()));
    }
    let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pa: Vec<usize> = ia.iter().map(|&i| labels[i]).collect();
    let pb: Vec<usize> = ib.iter().map(|&i| labels[i]).collect();
    let rest: Vec<f64> = lambdas.iter().map(|l| 1.0 - l).collect();
    let blend = |g: &mut Graph, src: Var, a: &[usize], b: &[usize]| -> Result<Var> {
        let ra = g.gather_rows(src, a)?;
        let rb = g.gather_rows(src, b)?;
        let ra = g.scale_rows(ra, lambdas.to_vec())?;
        let rb = g.scale_rows(rb, rest.clone())?;
        let s = g.add(ra, rb)?;
        g.l2_normalize_rows(s)
    };
    let xt = blend(g, x, &ia, &ib)?;
    let pt = blend(g, proxies, &pa, &pb)?;
    Ok((xt, pt))
}

/// Picks `count` index pairs with different labels and a mixing weight for
/// each, dropping pairs whose interpolants would be degenerate.
pub fn ps_plan<R: Rng + ?Sized>(
    x: &Tensor,
    labels: &[usize],
    proxies: &Tensor,
    count: usize,
    params: &PsParams,
    rng: &mut R,
) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    let n = labels.len();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Contract(
            "proxy synthesis needs at least two classes in the batch".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    let mut lambdas = Vec::with_capacity(count);
    while pairs.len() < count {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if labels[i] == labels[j] {
            continue;
        }
        let lambda = params.sample_lambda(rng)?;
        let a = PsEndpoint {
            x: x.row(i),
            p: proxies.row(labels[i]),
            label: labels[i],
        };
        let b = PsEndpoint {
            x: x.row(j),
            p: proxies.row(labels[j]),
            label: labels[j],
        };
        match ps_interpolate(a, b, lambda) {
            Ok(_) => {
                pairs.push((i, j));
                lambdas.push(lambda);
            }
            Err(Error::Degenerate { .. }) => {
                log::debug!("skipping degenerate PS pair ({i}, {j})");
            }
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, lambdas))
}
