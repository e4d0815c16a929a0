//! Mini-batch energy distance built on the entropic transport cost.
//!
//! Both batches are split in two by a fresh random permutation on every
//! call, and the estimate is `2·W(X₁, X̃₁) − W(X₁, X₂) − W(X̃₁, X̃₂)`. The
//! real batch is detached before any cost is formed, so gradients only
//! reach `X̃`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::ot::cost::cosine_cost_var;
use crate::ot::sinkhorn::{sinkhorn_var, SinkhornParams};

pub const MIN_ROWS: usize = 4;

/// The three transport terms of one estimate, in evaluation order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyTerms {
    pub cross: f64,
    pub real: f64,
    pub synthetic: f64,
}

fn halves<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let second = idx.split_off(n / 2);
    (idx, second)
}

/// Graph version: `x` is the real batch (always detached), `x_tilde` the
/// synthetic batch. Returns the scalar node and the term values.
pub fn energy_distance_var<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    x_tilde: Var,
    params: &SinkhornParams,
    rng: &mut R,
) -> Result<(Var, EnergyTerms)> {
    let (n, m) = (g.value(x).rows(), g.value(x_tilde).rows());
    if n < MIN_ROWS || m < MIN_ROWS {
        return Err(Error::BatchSize {
            op: "energy_distance",
            min: MIN_ROWS,
            got: n.min(m),
        });
    }
    let x = g.detach(x);
    let (r1, r2) = halves(n, rng);
    let (s1, s2) = halves(m, rng);
    let x1 = g.gather_rows(x, &r1)?;
    let x2 = g.gather_rows(x, &r2)?;
    let xt1 = g.gather_rows(x_tilde, &s1)?;
    let xt2 = g.gather_rows(x_tilde, &s2)?;

    let c_cross = cosine_cost_var(g, x1, xt1)?;
    let (w_cross, _) = sinkhorn_var(g, c_cross, params)?;
    let c_real = cosine_cost_var(g, x1, x2)?;
    let (w_real, _) = sinkhorn_var(g, c_real, params)?;
    let c_syn = cosine_cost_var(g, xt1, xt2)?;
    let (w_syn, _) = sinkhorn_var(g, c_syn, params)?;

    let terms = EnergyTerms {
        cross: g.value(w_cross).item(),
        real: g.value(w_real).item(),
        synthetic: g.value(w_syn).item(),
    };
    let two_cross = g.scale(w_cross, 2.0);
    let a = g.sub(two_cross, w_real)?;
    let out = g.sub(a, w_syn)?;
    Ok((out, terms))
}

/// Value-only energy distance between two unit-row batches.
pub fn energy_distance<R: Rng + ?Sized>(
    x: &Tensor,
    x_tilde: &Tensor,
    params: &SinkhornParams,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x_tilde.clone());
    let (v, _) = energy_distance_var(&mut g, a, b, params, rng)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn repeated(row: &[f64], n: usize) -> Tensor {
        Tensor::from_rows(&vec![row.to_vec(); n]).unwrap()
    }

    #[test]
    fn single_repeated_point_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = repeated(&[0.0, 1.0, 0.0], 8);
        let v = energy_distance(&x, &x, &SinkhornParams::default(), &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn orthogonal_points_give_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = repeated(&[1.0, 0.0], 6);
        let y = repeated(&[0.0, 1.0], 6);
        let v = energy_distance(&x, &y, &SinkhornParams::default(), &mut rng).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn small_batches_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = repeated(&[1.0, 0.0], 3);
        let y = repeated(&[1.0, 0.0], 8);
        assert!(matches!(
            energy_distance(&x, &y, &SinkhornParams::default(), &mut rng),
            Err(Error::BatchSize { .. })
        ));
    }

    #[test]
    fn gradient_reaches_only_the_synthetic_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = 0.5f64.sqrt();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s], vec![-s, s]];
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&rows).unwrap().with_requires_grad(true));
        let xt = g.input(Tensor::from_rows(&rows).unwrap().with_requires_grad(true));
        let xt = g.l2_normalize_rows(xt).unwrap();
        let (v, _) = energy_distance_var(&mut g, x, xt, &SinkhornParams::default(), &mut rng).unwrap();
        let grads = g.backward(v).unwrap();
        assert!(grads.get(x).is_none());
    }
}
