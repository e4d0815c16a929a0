//! Log-domain Sinkhorn with gradients through the unrolled iterations.
//!
//! With uniform marginals `a = 1/n`, `b = 1/m` the dual potentials are
//! updated alternately by entropic c-transforms
//!
//! ```text
//! f_i = −ε · LSE_j((g_j − C_ij)/ε + log b)
//! g_j = −ε · LSE_i((f_i − C_ij)/ε + log a)
//! ```
//!
//! and the plan is `M_ij = exp((f_i + g_j − C_ij)/ε + log a + log b)`.
//! Every update is a graph node, so the backward pass differentiates the
//! exact sequence of iterations that produced the value. The reported cost
//! is `⟨M, C⟩` without the entropy term.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::ot::cost::CostMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// L1 marginal violation below which iteration stops. Zero runs exactly
    /// `max_iterations` updates, which keeps the unrolled function fixed.
    pub convergence_tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: 0.05,
            max_iterations: 200,
            convergence_tol: 1e-6,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Contract(format!(
                "sinkhorn epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Contract("sinkhorn max_iterations must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Contract("sinkhorn convergence_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Entropic transport plan together with its diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub epsilon: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// L1 distance of the plan's row and column sums to the marginals.
    pub marginal_violation: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.plan.rows()).map(|i| self.plan.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let (n, m) = (self.plan.rows(), self.plan.cols());
        (0..m)
            .map(|j| (0..n).map(|i| self.plan.data()[i * m + j]).sum())
            .collect()
    }

    /// Debug dump, one `row,col,mass` line per entry.
    pub fn to_csv(&self) -> String {
        let m = self.plan.cols();
        let mut s = String::from("row,col,mass\n");
        for (k, v) in self.plan.data().iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", k / m, k % m, v);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn row_violation(cost: &Tensor, f: &[f64], g: &[f64], eps: f64, log_ab: f64, target: f64) -> f64 {
    f.iter()
        .enumerate()
        .map(|(i, fi)| {
            let s: f64 = cost
                .row(i)
                .iter()
                .zip(g)
                .map(|(c, gj)| ((fi + gj - c) / eps + log_ab).exp())
                .sum();
            (s - target).abs()
        })
        .sum()
}

/// Sinkhorn on a cost node. Returns the differentiable transport cost and
/// the plan.
pub fn sinkhorn_var(g: &mut Graph, cost: Var, params: &SinkhornParams) -> Result<(Var, TransportPlan)> {
    params.validate()?;
    let ct = g.value(cost);
    if !ct.is_matrix() {
        return Err(Error::dim("sinkhorn", "2-d cost", format!("{:?}", ct.shape())));
    }
    let (n, m) = (ct.rows(), ct.cols());
    let eps = params.epsilon;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();

    let mut g_pot = g.constant(Tensor::zeros(&[m]));
    let mut iterations_run = 0;
    for _ in 0..params.max_iterations {
        let f_pot = g.softmin_rows(cost, g_pot, eps, log_b)?;
        g_pot = g.softmin_cols(cost, f_pot, eps, log_a)?;
        iterations_run += 1;
        if params.convergence_tol > 0.0 {
            let v = row_violation(
                g.value(cost),
                g.value(f_pot).data(),
                g.value(g_pot).data(),
                eps,
                log_a + log_b,
                1.0 / n as f64,
            );
            if v <= params.convergence_tol {
                break;
            }
        }
    }
    // final row-then-column projection; the plan is read after it
    let f_pot = g.softmin_rows(cost, g_pot, eps, log_b)?;
    let g_pot = g.softmin_cols(cost, f_pot, eps, log_a)?;
    let (w, plan) = g.plan_cost(cost, f_pot, g_pot, eps, log_a + log_b)?;

    let plan = Tensor::matrix(n, m, plan)?;
    let mut tp = TransportPlan {
        plan,
        row_marginal: vec![1.0 / n as f64; n],
        col_marginal: vec![1.0 / m as f64; m],
        epsilon: eps,
        iterations_run,
        converged: false,
        marginal_violation: 0.0,
    };
    let violation: f64 = tp
        .row_sums()
        .iter()
        .zip(&tp.row_marginal)
        .chain(tp.col_sums().iter().zip(&tp.col_marginal))
        .map(|(s, t)| (s - t).abs())
        .sum();
    tp.marginal_violation = violation;
    tp.converged = violation <= params.convergence_tol;
    if tp.plan.has_nan() || !g.value(w).item().is_finite() {
        return Err(Error::Degenerate {
            op: "sinkhorn",
            detail: "non-finite plan".into(),
        });
    }
    Ok((w, tp))
}

/// Entropic transport cost `W_c = ⟨M, C⟩` and its plan.
pub fn sinkhorn(cost: &CostMatrix, params: &SinkhornParams) -> Result<(f64, TransportPlan)> {
    let mut g = Graph::new();
    let c = g.constant(cost.values.clone());
    let (w, plan) = sinkhorn_var(&mut g, c, params)?;
    Ok((g.value(w).item(), plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_gives_product_plan() {
        let c = CostMatrix::from_tensor(Tensor::zeros(&[3, 4])).unwrap();
        let (w, plan) = sinkhorn(&c, &SinkhornParams::default()).unwrap();
        assert_eq!(w, 0.0);
        assert!(plan.converged);
        for v in plan.plan.data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn swap_instance_close_to_zero() {
        let c = CostMatrix::from_tensor(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        let p = SinkhornParams {
            epsilon: 0.01,
            ..Default::default()
        };
        let (w, plan) = sinkhorn(&c, &p).unwrap();
        assert!(plan.converged);
        assert!(w.abs() <= 0.05, "w = {w}");
        for (s, t) in plan.row_sums().iter().zip(&plan.row_marginal) {
            assert!((s - t).abs() <= 1e-6);
        }
        assert!(plan.plan.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_convergence_is_reported() {
        let c = CostMatrix::from_tensor(
            Tensor::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.3, 0.2, 0.8], vec![0.7, 0.4, 0.6]]).unwrap(),
        )
        .unwrap();
        let p = SinkhornParams {
            epsilon: 0.01,
            max_iterations: 1,
            convergence_tol: 1e-12,
        };
        let (_, plan) = sinkhorn(&c, &p).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_run, 1);
    }

    #[test]
    fn invalid_params() {
        let c = CostMatrix::from_tensor(Tensor::zeros(&[2, 2])).unwrap();
        let p = SinkhornParams {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(sinkhorn(&c, &p).is_err());
    }

    #[test]
    fn csv_dump_lists_every_entry() {
        let c = CostMatrix::from_tensor(Tensor::zeros(&[2, 3])).unwrap();
        let (_, plan) = sinkhorn(&c, &SinkhornParams::default()).unwrap();
        let csv = plan.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("row,col,mass\n0,0,"));
    }
}
