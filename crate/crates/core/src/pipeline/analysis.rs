//! Read-only analyses of a trained state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    kl_alignment, pca_2d_dump, proxy_proxy_similarity, proxy_sample_similarity, recall_at_k, GaussianClassModel,
    ProxyProxyStats, ProxySampleStats,
};
use crate::losses::{EmbeddingBatch, ProxySet};
use crate::nn::{Graph, Mode};
use crate::synthesis::{ps_batch_var, ps_plan, sample_noise, PsParams};

use super::config::Method;
use super::train::TrainState;

/// Generated vectors per novel class when fitting class Gaussians.
pub const NOVEL_SAMPLES_PER_CLASS: usize = 40;

/// Rng for analyses, disjoint from all training streams.
pub fn analysis_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

pub fn embed_dataset(state: &TrainState, data: &Dataset) -> Result<EmbeddingBatch> {
    state
        .embedder
        .embed_batch(&state.store, &data.inputs, data.labels.clone())
}

/// Recall@k on `data` for every `k` smaller than the sample count.
pub fn recall(state: &TrainState, data: &Dataset, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let batch = embed_dataset(state, data)?;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k < batch.len()).collect();
    Ok(ks.iter().copied().zip(recall_at_k(&batch, &ks)?).collect())
}

/// `per_class` generator samples for every generator class (eval mode),
/// labelled in loss label space.
pub fn generated_batch(state: &mut TrainState, per_class: usize) -> Result<Option<EmbeddingBatch>> {
    let Some(gen) = state.generator.clone() else {
        return Ok(None);
    };
    let labels: Vec<usize> = (0..gen.classes)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    let mut rng = analysis_rng(state.config.seed);
    let noise = sample_noise(&mut rng, labels.len())?;
    gen.generate(&mut state.store, &labels, &noise, Mode::Eval).map(Some)
}

/// Sample-to-proxy and proxy-to-proxy statistics of the synthetic classes.
/// For generator methods these use generated vectors and their proxies; for
/// Proxy Synthesis, interpolants of one training batch and their mixed
/// proxies. `None` for vanilla.
pub fn synthetic_alignment(
    state: &mut TrainState,
    train: &Dataset,
) -> Result<Option<(ProxySampleStats, Option<ProxyProxyStats>)>> {
    match state.config.method {
        Method::Vanilla => Ok(None),
        Method::Ps => {
            let mut rng = analysis_rng(state.config.seed);
            let b = state.config.batch_real.min(train.len());
            let idx = rand::seq::index::sample(&mut rng, train.len(), b).into_vec();
            let sub = train.subset(&idx)?;
            let x = state.embedder.embed(&state.store, &sub.inputs)?;
            let p = state.bank.normalized(&state.store, ProxySet::Real)?;
            let params = PsParams {
                alpha: state.config.ps_alpha,
                renormalize: true,
            };
            let (pairs, lambdas) = ps_plan(&x, &sub.labels, &p, state.config.batch_synthetic, &params, &mut rng)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let pv = g.constant(p.clone());
            let (xt, pt) = ps_batch_var(&mut g, xv, &sub.labels, pv, &pairs, &lambdas)?;
            let syn = EmbeddingBatch::new(g.value(xt), (0..pairs.len()).collect())?;
            let ps = proxy_sample_similarity(&syn, g.value(pt), 0)?;
            let pp = proxy_proxy_similarity(&p, g.value(pt))?;
            Ok(Some((ps, Some(pp))))
        }
        Method::L2aEc | Method::L2aNc => {
            let Some(syn) = generated_batch(state, 8)? else {
                return Ok(None);
            };
            let all = state.bank.normalized(&state.store, ProxySet::All)?;
            let ps = proxy_sample_similarity(&syn, &all, 0)?;
            let pp = if state.bank.novel.is_some() {
                let real = state.bank.normalized(&state.store, ProxySet::Real)?;
                let novel = state.bank.normalized(&state.store, ProxySet::Novel)?;
                Some(proxy_proxy_similarity(&real, &novel)?)
            } else {
                None
            };
            Ok(Some((ps, pp)))
        }
    }
}

/// Mean KL alignment of training classes and (for l2a_nc) novel classes
/// to the unseen test classes, all fitted as diagonal Gaussians in the
/// learned embedding space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlReport {
    pub train_to_test: f64,
    pub novel_to_test: Option<f64>,
}

pub fn kl_report(state: &mut TrainState, train: &Dataset, test: &Dataset) -> Result<KlReport> {
    let test_model = GaussianClassModel::fit(&embed_dataset(state, test)?);
    let train_model = GaussianClassModel::fit(&embed_dataset(state, train)?);
    let train_to_test = kl_alignment(&train_model, &test_model)?;
    let novel_to_test = if state.bank.novel.is_some() {
        let syn = generated_batch(state, NOVEL_SAMPLES_PER_CLASS)?
            .ok_or_else(|| Error::Contract("novel proxies without a generator".into()))?;
        Some(kl_alignment(&GaussianClassModel::fit(&syn), &test_model)?)
    } else {
        None
    };
    Ok(KlReport {
        train_to_test,
        novel_to_test,
    })
}

/// `label,u,v` projection of the test embeddings (plus generated novel
/// vectors, labelled after the test classes, when a generator exists).
pub fn pca_dump(state: &mut TrainState, test: &Dataset) -> Result<String> {
    let mut batch = embed_dataset(state, test)?;
    if state.bank.novel.is_some() {
        if let Some(syn) = generated_batch(state, 8)? {
            let shift = test.classes;
            let moved = EmbeddingBatch::new(&syn.tensor()?, syn.labels.iter().map(|l| l + shift).collect())?;
            batch = crate::losses::union_batch(&batch, &moved, crate::losses::UnionMode::ExistingClasses)?;
        }
    }
    pca_2d_dump(&batch)
}
