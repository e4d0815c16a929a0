use crate::error::{Error, Result};
use crate::nn::graph::dot;
use crate::nn::{Graph, Tensor, Var};

/// Rows further than this from unit norm are rejected by the cosine cost.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    /// `1 − ⟨x, y⟩` on unit vectors.
    Cosine,
}

/// Pairwise cost between two point clouds, `n × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub kind: CostKind,
}

impl CostMatrix {
    /// Wraps an arbitrary nonnegative matrix (used by the exact-OT oracle tests).
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if !values.is_matrix() {
            return Err(Error::dim("CostMatrix", "2-d", format!("{:?}", values.shape())));
        }
        if values.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("cost entries must be finite and nonnegative".into()));
        }
        Ok(CostMatrix {
            values,
            kind: CostKind::Cosine,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.cols() + j]
    }
}

pub(crate) fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(Error::dim("cosine_cost", "2-d", format!("{:?}", t.shape())));
    }
    for i in 0..t.rows() {
        let n = dot(t.row(i), t.row(i)).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `C[i][j] = 1 − ⟨xp_i, xq_j⟩` for unit rows.
pub fn cosine_cost(xp: &Tensor, xq: &Tensor) -> Result<CostMatrix> {
    let mut g = Graph::new();
    let a = g.constant(xp.clone());
    let b = g.constant(xq.clone());
    let c = cosine_cost_var(&mut g, a, b)?;
    Ok(CostMatrix {
        values: g.value(c).clone(),
        kind: CostKind::Cosine,
    })
}

/// Differentiable cosine cost between two unit-row nodes.
pub fn cosine_cost_var(g: &mut Graph, xp: Var, xq: Var) -> Result<Var> {
    check_unit_rows(g.value(xp), "Xp")?;
    check_unit_rows(g.value(xq), "Xq")?;
    if g.value(xp).cols() != g.value(xq).cols() {
        return Err(Error::dim("cosine_cost", g.value(xp).cols(), g.value(xq).cols()));
    }
    let sim = g.matmul_t(xp, xq)?;
    Ok(g.affine(sim, -1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_antipodal_orthogonal() {
        let xp = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let xq = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = cosine_cost(&xp, &xq).unwrap();
        assert_eq!(c.values.data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn non_unit_rows_rejected() {
        let xp = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let xq = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(cosine_cost(&xp, &xq), Err(Error::Contract(_))));
    }
}
