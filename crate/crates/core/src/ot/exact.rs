//! Exact optimal transport for small uniform-marginal instances.
//!
//! With marginals `1/n` and `1/m`, let `L = lcm(n, m)`. Replicating every
//! row `L/n` times and every column `L/m` times turns the transportation
//! problem into an `L × L` assignment problem: the polytope has integral
//! vertices when supplies and demands are integers, and integral flows are
//! exactly the permutations of the replicated problem. The optimum divided
//! by `L` is the optimal transport cost.

use crate::error::{Error, Result};
use crate::ot::cost::CostMatrix;

pub const MAX_SIDE: usize = 10;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Minimum-cost perfect matching on a square matrix (Kuhn–Munkres with
/// potentials, `O(n³)`). Returns the column assigned to every row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual source column
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact optimal transport cost between uniform marginals.
pub fn exact_ot(cost: &CostMatrix) -> Result<f64> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > MAX_SIDE || m > MAX_SIDE {
        return Err(Error::Size(format!(
            "exact_ot supports at most {MAX_SIDE}×{MAX_SIDE}, got {n}×{m}"
        )));
    }
    let l = n / gcd(n, m) * m;
    let (rep_r, rep_c) = (l / n, l / m);
    let mut big = vec![0.0; l * l];
    for r in 0..l {
        for s in 0..l {
            big[r * l + s] = cost.at(r / rep_r, s / rep_c);
        }
    }
    let assignment = hungarian(&big, l);
    let total: f64 = assignment.iter().enumerate().map(|(r, &s)| big[r * l + s]).sum();
    Ok(total / l as f64)
}
