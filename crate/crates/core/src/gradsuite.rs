//! Finite-difference validation of every differentiable operation, as run
//! by `novelaug grad-check`.
//!
//! Loss checks draw α ∈ [1, 4], δ ∈ [0, 0.2] and T ∈ [0.5, 2]. At the default
//! scales (α = 32, T = 0.05) some gradient components fall below the
//! roundoff floor of central differences and the relative error measures
//! difference noise rather than the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{j_met_var, LossKind, LossParams};
use crate::nn::{grad_check, grad_check_params, ConditionalBatchNorm, Graph, Mode, ParamStore, Tensor};
use crate::ot::{cosine_cost_var, sinkhorn_var, SinkhornParams};
use crate::pipeline::Embedder;
use crate::synthesis::{sample_noise, ConditionalGenerator};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SINKHORN_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub op: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn moderate(kind: LossKind, rng: &mut ChaCha8Rng) -> LossParams {
    LossParams {
        kind,
        alpha: rng.gen_range(1.0..4.0),
        delta: rng.gen_range(0.0..0.2),
        temperature: rng.gen_range(0.5..2.0),
    }
}

fn run<F>(op: &str, configs: usize, tolerance: f64, mut one: F) -> Result<CheckRow>
where
    F: FnMut() -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        worst = worst.max(one()?);
    }
    Ok(CheckRow {
        op: op.into(),
        configs,
        max_rel_err: worst,
        tolerance,
    })
}

/// Loss `Σ w ⊙ y` over a matrix output, with `w` drawn once per config.
fn probe(g: &mut Graph, y: crate::nn::Var, w: &[f64]) -> Result<crate::nn::Var> {
    g.weighted_sum(y, w.to_vec())
}

fn check_linear(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("linear", configs, TOLERANCE, || {
        let (b, i, o) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let w = gaussian(rng, b * o);
        let point = gaussian(rng, b * i + o * i + o);
        grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.input(Tensor::matrix(b, i, p[..b * i].to_vec())?.with_requires_grad(true));
                let wt = g.input(Tensor::matrix(o, i, p[b * i..b * i + o * i].to_vec())?.with_requires_grad(true));
                let bt = g.input(Tensor::vector(p[b * i + o * i..].to_vec())?.with_requires_grad(true));
                let y = g.linear(x, wt, bt)?;
                let l = probe(&mut g, y, &w)?;
                let gr = g.backward(l)?;
                let mut grad = gr.get(x).unwrap_or(&[]).to_vec();
                grad.extend_from_slice(gr.get(wt).unwrap_or(&[]));
                grad.extend_from_slice(gr.get(bt).unwrap_or(&[]));
                Ok((g.value(l).item(), grad))
            },
            &point,
            STEP,
        )
    })
}

fn check_l2_normalize(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("l2_normalize", configs, TOLERANCE, || {
        let (n, d) = (rng.gen_range(1..=5), rng.gen_range(2..=6));
        let w = gaussian(rng, n * d);
        let point = gaussian(rng, n * d);
        grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.input(Tensor::matrix(n, d, p.to_vec())?.with_requires_grad(true));
                let y = g.l2_normalize_rows(x)?;
                let l = probe(&mut g, y, &w)?;
                let gr = g.backward(l)?;
                Ok((g.value(l).item(), gr.get(x).unwrap_or(&[]).to_vec()))
            },
            &point,
            STEP,
        )
    })
}

fn check_cbn(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("conditional_batch_norm", configs, TOLERANCE, || {
        let (n, d, c) = (rng.gen_range(2..=6), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let mut store = ParamStore::new();
        let x = store.insert(
            "x",
            Tensor::matrix(n, d, gaussian(rng, n * d))?.with_requires_grad(true),
        )?;
        let cbn = ConditionalBatchNorm::new(&mut store, "cbn", c, d)?;
        for id in cbn.params() {
            let t = store.get_mut(id);
            let noise = gaussian(rng, t.numel());
            t.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += 0.5 * e);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let w = gaussian(rng, n * d);
        let mut ids = vec![x];
        ids.extend(cbn.params());
        grad_check_params(
            &mut store,
            &ids,
            |s| {
                let mut g = Graph::new();
                let xv = g.param(s, x);
                let y = cbn.forward(&mut g, s, xv, &labels, Mode::Train)?;
                let l = probe(&mut g, y, &w)?;
                Ok((g, l))
            },
            STEP,
        )
    })
}

fn check_loss(kind: LossKind, rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run(kind.name(), configs, TOLERANCE, || {
        let (b, k, d) = (rng.gen_range(2..=6), rng.gen_range(2..=4), rng.gen_range(2..=5));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let params = moderate(kind, rng);
        let point = gaussian(rng, (b + k) * d);
        grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.input(Tensor::matrix(b, d, p[..b * d].to_vec())?.with_requires_grad(true));
                let pr = g.input(Tensor::matrix(k, d, p[b * d..].to_vec())?.with_requires_grad(true));
                let xn = g.l2_normalize_rows(x)?;
                let l = j_met_var(&mut g, xn, &labels, pr, &params)?;
                let gr = g.backward(l)?;
                let mut grad = gr.get(x).unwrap_or(&[]).to_vec();
                grad.extend_from_slice(gr.get(pr).unwrap_or(&[]));
                Ok((g.value(l).item(), grad))
            },
            &point,
            STEP,
        )
    })
}

fn check_generator(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("generator_forward", configs, TOLERANCE, || {
        let (classes, hidden, out, m) = (
            rng.gen_range(1..=3),
            rng.gen_range(2..=5),
            rng.gen_range(2..=4),
            rng.gen_range(3..=5),
        );
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
        let gen = ConditionalGenerator::new(&mut store, classes, 0, hidden, out, &mut init)?;
        for id in gen.params() {
            let t = store.get_mut(id);
            let noise = gaussian(rng, t.numel());
            t.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += 0.3 * e);
        }
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        let noise = sample_noise(rng, m)?;
        let proxies = Tensor::matrix(classes + 1, out, gaussian(rng, (classes + 1) * out))?;
        let params = moderate(LossKind::ProxyAnchor, rng);
        // biases feeding a batch norm are cancelled by it; see check_prebn_bias
        let cancelled: Vec<_> = gen.layers[..3].iter().map(|l| l.bias).collect();
        let ids: Vec<_> = gen.params().into_iter().filter(|id| !cancelled.contains(id)).collect();
        grad_check_params(
            &mut store,
            &ids,
            |s| {
                let mut g = Graph::new();
                let z = g.constant(noise.clone());
                let x = gen.forward(&mut g, s, &labels, z, Mode::Train)?;
                let p = g.constant(proxies.clone());
                let l = j_met_var(&mut g, x, &labels, p, &params)?;
                Ok((g, l))
            },
            STEP,
        )
    })
}

/// Maximum analytic gradient magnitude on the generator biases that feed a
/// batch norm, which must vanish.
fn check_prebn_bias(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("generator_prebn_bias_abs", configs, 1e-9, || {
        let (classes, hidden, out, m) = (
            rng.gen_range(1..=3),
            rng.gen_range(2..=5),
            rng.gen_range(2..=4),
            rng.gen_range(3..=5),
        );
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
        let gen = ConditionalGenerator::new(&mut store, classes, 0, hidden, out, &mut init)?;
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        let noise = sample_noise(rng, m)?;
        let proxies = Tensor::matrix(classes + 1, out, gaussian(rng, (classes + 1) * out))?;
        let mut g = Graph::new();
        let z = g.constant(noise);
        let x = gen.forward(&mut g, &mut store, &labels, z, Mode::Train)?;
        let p = g.constant(proxies);
        let l = j_met_var(&mut g, x, &labels, p, &moderate(LossKind::ProxyAnchor, rng))?;
        g.backward_into(l, &mut store)?;
        Ok(gen.layers[..3]
            .iter()
            .filter_map(|layer| store.get(layer.bias).grad())
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs())))
    })
}

fn check_embedder(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    run("embedder_with_loss", configs, TOLERANCE, || {
        let (b, i, h, d, k) = (
            rng.gen_range(2..=5),
            rng.gen_range(2..=4),
            rng.gen_range(2..=5),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        );
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
        let emb = Embedder::new(&mut store, i, &[h], d, &mut init)?;
        let proxies = store.insert(
            "p",
            Tensor::matrix(k, d, gaussian(rng, k * d))?.with_requires_grad(true),
        )?;
        let inputs = Tensor::matrix(b, i, gaussian(rng, b * i))?;
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let params = moderate(LossKind::ALL[rng.gen_range(0..3)], rng);
        let mut ids = emb.params();
        ids.push(proxies);
        grad_check_params(
            &mut store,
            &ids,
            |s| {
                let mut g = Graph::new();
                let xin = g.constant(inputs.clone());
                let x = emb.forward(&mut g, s, xin)?;
                let p = g.param(s, proxies);
                let l = j_met_var(&mut g, x, &labels, p, &params)?;
                Ok((g, l))
            },
            STEP,
        )
    })
}

fn check_sinkhorn(rng: &mut ChaCha8Rng, configs: usize) -> Result<CheckRow> {
    let params = SinkhornParams {
        epsilon: 0.1,
        max_iterations: 30,
        convergence_tol: 0.0,
    };
    run("sinkhorn_value", configs, SINKHORN_TOLERANCE, || {
        let (n, m, d) = (rng.gen_range(2..=5), rng.gen_range(2..=5), 3);
        let point = gaussian(rng, n * d);
        let mut g0 = Graph::new();
        let q = g0.constant(Tensor::matrix(m, d, gaussian(rng, m * d))?);
        let q = g0.l2_normalize_rows(q)?;
        let xq = g0.value(q).clone();
        grad_check(
            |p| {
                let mut g = Graph::new();
                let x = g.input(Tensor::matrix(n, d, p.to_vec())?.with_requires_grad(true));
                let xn = g.l2_normalize_rows(x)?;
                let yq = g.constant(xq.clone());
                let c = cosine_cost_var(&mut g, xn, yq)?;
                let (w, _) = sinkhorn_var(&mut g, c, &params)?;
                let gr = g.backward(w)?;
                Ok((g.value(w).item(), gr.get(x).unwrap_or(&[]).to_vec()))
            },
            &point,
            STEP,
        )
    })
}

/// Runs every check with `configs` random configurations each.
pub fn run_suite(seed: u64, configs: usize) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![
        check_linear(&mut rng, configs)?,
        check_cbn(&mut rng, configs)?,
        check_l2_normalize(&mut rng, configs)?,
    ];
    for kind in LossKind::ALL {
        rows.push(check_loss(kind, &mut rng, configs)?);
    }
    rows.push(check_generator(&mut rng, configs)?);
    rows.push(check_prebn_bias(&mut rng, configs)?);
    rows.push(check_embedder(&mut rng, configs)?);
    rows.push(check_sinkhorn(&mut rng, configs)?);
    Ok(rows)
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!(
        "{:<24} {:>7} {:>12} {:>9}  result\n",
        "operation", "configs", "max rel err", "tol"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>7} {:>12.3e} {:>9.0e}  {}\n",
            r.op,
            r.configs,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let rows = run_suite(3, 5).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            assert!(r.passed(), "{}", format_table(&rows));
        }
    }
}
