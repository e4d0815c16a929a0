//! Sinkhorn against the exact transport cost, and the mini-batch energy
//! distance between two point clouds.

use novelaug::nn::Tensor;
use novelaug::ot::{cosine_cost, energy_distance, exact_ot, sinkhorn, SinkhornParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(rng: &mut ChaCha8Rng, center: &[f64], n: usize, spread: f64) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = center
                .iter()
                .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn main() -> novelaug::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let origin = [0.0; 6];
    let a = cloud(&mut rng, &origin, 5, 1.0);
    let b = cloud(&mut rng, &origin, 4, 1.0);
    let cost = cosine_cost(&a, &b)?;
    let exact = exact_ot(&cost)?;
    println!("exact transport cost {exact:.5}");
    for eps in [0.5, 0.1, 0.05, 0.01] {
        let params = SinkhornParams {
            epsilon: eps,
            max_iterations: 5000,
            convergence_tol: 1e-9,
        };
        let (w, plan) = sinkhorn(&cost, &params)?;
        println!(
            "eps {eps:<5} sinkhorn {w:.5}  gap {:+.2e}  iterations {:>4}  marginal violation {:.1e}",
            w - exact,
            plan.iterations_run,
            plan.marginal_violation
        );
    }

    let params = SinkhornParams::default();
    let e1 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let e2 = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let x = cloud(&mut rng, &e1, 32, 0.1);
    let same = cloud(&mut rng, &e1, 32, 0.1);
    let other = cloud(&mut rng, &e2, 32, 0.1);
    println!(
        "energy distance, same cluster      {:.4}",
        energy_distance(&x, &same, &params, &mut rng)?
    );
    println!(
        "energy distance, orthogonal cluster {:.4}",
        energy_distance(&x, &other, &params, &mut rng)?
    );
    Ok(())
}
