//! The three proxy-based losses on one batch, then a short proxy-only fit
//! with AdamW.

use novelaug::losses::{j_met_var, LossKind, LossParams, ProxyBank, ProxySet};
use novelaug::nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> novelaug::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d, classes) = (24, 8, 4);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let x = Tensor::from_rows(&rows)?;

    for kind in LossKind::ALL {
        let params = LossParams::for_kind(kind);
        let mut store = ParamStore::new();
        let bank = ProxyBank::new(&mut store, classes, 0, d, &mut ChaCha8Rng::seed_from_u64(2))?;
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                ..AdamWConfig::default()
            },
            bank.params(),
            &store,
        );
        let mut trace = Vec::new();
        for _ in 0..60 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (p, _) = bank.select(&mut g, &store, ProxySet::Real)?;
            let loss = j_met_var(&mut g, xv, &labels, p, &params)?;
            trace.push(g.value(loss).item());
            store.zero_grad();
            g.backward_into(loss, &mut store)?;
            opt.step(&mut store)?;
        }
        println!(
            "{:<13} initial {:>8.4}  after 60 proxy steps {:>8.4}",
            kind.name(),
            trace[0],
            trace[trace.len() - 1]
        );
    }
    Ok(())
}
