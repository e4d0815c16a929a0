//! Central finite-difference validation of analytic gradients.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::{ParamId, ParamStore};

/// Relative discrepancy used throughout: `|a − c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Width of the roundoff band of a central difference with step `h` on a
/// function whose value is `value`.
pub fn roundoff_band(value: f64, h: f64) -> f64 {
    16.0 * f64::EPSILON * value.abs().max(1.0) / h
}

/// Relative error of one coordinate. Components too small for a central
/// difference to resolve to 1e-4 relative precision (below `band / 1e-4`)
/// count as matching when the two estimates agree within `band`.
pub fn coordinate_error(analytic: f64, numeric: f64, band: f64) -> f64 {
    let unresolvable = analytic.abs().max(numeric.abs()) * 1e-4 <= band;
    if unresolvable && (analytic - numeric).abs() <= band {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Compares the analytic gradient of `f` at `point` with central differences
/// of step `h`. `f` returns the value and the analytic gradient; the maximum
/// [`coordinate_error`] over coordinates is returned.
pub fn grad_check<F>(mut f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(point)?;
    let band = roundoff_band(value, h);
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let (up, _) = f(&x)?;
        x[k] = orig - h;
        let (down, _) = f(&x)?;
        x[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(coordinate_error(analytic[k], numeric, band));
    }
    Ok(worst)
}

/// Gradient check over store entries. `build` records a fresh graph from the
/// current store contents and returns it with its scalar loss node.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], mut build: F, h: f64) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<(Graph, Var)>,
{
    for &id in ids {
        store.get_mut(id).zero_grad();
    }
    let (graph, loss) = build(store)?;
    graph.backward_into(loss, store)?;
    let band = roundoff_band(graph.value(loss).item(), h);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let (g, l) = build(store)?;
            let up = g.value(l).item();
            store.get_mut(id).data_mut()[i] = orig - h;
            let (g, l) = build(store)?;
            let down = g.value(l).item();
            store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(coordinate_error(analytic[k][i], (up - down) / (2.0 * h), band));
        }
    }
    for &id in ids {
        store.get_mut(id).zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_fn(
        shape: Vec<usize>,
        build: impl Fn(&mut Graph, Var) -> Result<Var>,
    ) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |p: &[f64]| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(shape.clone(), p.to_vec())?.with_requires_grad(true));
            let y = build(&mut g, x)?;
            let grads = g.backward(y)?;
            Ok((g.value(y).item(), grads.get(x).unwrap().to_vec()))
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let point: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f = graph_fn(vec![6], |g, x| {
                let d = g.dot(x, x)?;
                Ok(g.scale(d, 0.5))
            });
            assert!(grad_check(f, &point, 1e-5).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn normalize_then_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..20 {
            let point: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = target.clone();
            let f = graph_fn(vec![3, 4], move |g, x| {
                let y = g.l2_normalize_rows(x)?;
                let c = g.constant(Tensor::matrix(3, 4, t.clone())?);
                g.dot(y, c)
            });
            assert!(grad_check(f, &point, 1e-5).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn relative_error_handles_zeros() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-9);
    }
}
