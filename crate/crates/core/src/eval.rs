//! Retrieval metrics and embedding-space diagnostics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::nn::graph::dot;
use crate::nn::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Recall@k for every `k` in `ks`: the fraction of queries whose `k`
/// nearest neighbours by cosine similarity (the query itself excluded, ties
/// broken by lower index) contain a sample of the query's class.
pub fn recall_at_k(batch: &EmbeddingBatch, ks: &[usize]) -> Result<Vec<f64>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchSize {
            op: "recall_at_k",
            min: 2,
            got: n,
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::Contract(format!("k = {k} must be in 1..{n}")));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    // rank of the first same-class neighbour per query; None if beyond kmax
    let first_hit: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| (dot(batch.row(q), batch.row(j)), j))
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            order
                .iter()
                .take(kmax)
                .position(|&(_, j)| batch.labels[j] == batch.labels[q])
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count() as f64 / n as f64)
        .collect())
}

fn normalize_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = dot(r, r).sqrt();
            if !(n >= 1e-12) {
                return Err(Error::Degenerate {
                    op: "similarity",
                    detail: format!("row {i} has zero norm"),
                });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSimilarity {
    pub class: usize,
    pub mean: f64,
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxySampleStats {
    pub per_class: Vec<ClassSimilarity>,
    pub mean: f64,
    pub min: f64,
}

/// Cosine similarity of every synthetic vector to its own class proxy.
/// Row `l − label_offset` of `proxies` belongs to label `l`.
pub fn proxy_sample_similarity(
    synthetic: &EmbeddingBatch,
    proxies: &Tensor,
    label_offset: usize,
) -> Result<ProxySampleStats> {
    if synthetic.is_empty() {
        return Err(Error::Contract("no synthetic samples".into()));
    }
    let p = normalize_rows(proxies)?;
    let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, f64::INFINITY, 0); p.len()];
    let mut all = Vec::with_capacity(synthetic.len());
    for i in 0..synthetic.len() {
        let l = synthetic.labels[i];
        let c = l
            .checked_sub(label_offset)
            .filter(|&c| c < p.len())
            .ok_or(Error::LabelRange {
                label: l,
                classes: label_offset + p.len(),
            })?;
        let s = dot(synthetic.row(i), &p[c]);
        sums[c].0 += s;
        sums[c].1 = sums[c].1.min(s);
        sums[c].2 += 1;
        all.push(s);
    }
    let per_class = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(c, s)| ClassSimilarity {
            class: c + label_offset,
            mean: s.0 / s.2 as f64,
            min: s.1,
        })
        .collect();
    Ok(ProxySampleStats {
        per_class,
        mean: all.iter().sum::<f64>() / all.len() as f64,
        min: all.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyProxyStats {
    pub mean: f64,
    pub max: f64,
}

/// Statistics of the full real × novel proxy cosine matrix.
pub fn proxy_proxy_similarity(real: &Tensor, novel: &Tensor) -> Result<ProxyProxyStats> {
    let (p, q) = (normalize_rows(real)?, normalize_rows(novel)?);
    if p.is_empty() || q.is_empty() {
        return Err(Error::Contract("proxy banks must be nonempty".into()));
    }
    let sims: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| dot(a, b))).collect();
    Ok(ProxyProxyStats {
        mean: sims.iter().sum::<f64>() / sims.len() as f64,
        max: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Diagonal Gaussian per class.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClassModel {
    pub classes: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianClassModel {
    /// Sample mean and (biased) variance per class, floored at
    /// [`VARIANCE_FLOOR`]. Classes with fewer than two samples are skipped.
    pub fn fit(batch: &EmbeddingBatch) -> Self {
        let d = batch.dim();
        let mut classes: Vec<usize> = batch.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut out = GaussianClassModel {
            classes: Vec::new(),
            means: Vec::new(),
            variances: Vec::new(),
        };
        for c in classes {
            let rows: Vec<&[f64]> = (0..batch.len())
                .filter(|&i| batch.labels[i] == c)
                .map(|i| batch.row(i))
                .collect();
            if rows.len() < 2 {
                log::warn!("class {c} has {} sample(s); excluded from the Gaussian fit", rows.len());
                continue;
            }
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
            let var: Vec<f64> = (0..d)
                .map(|k| {
                    let v = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                    v.max(VARIANCE_FLOOR)
                })
                .collect();
            out.classes.push(c);
            out.means.push(mean);
            out.variances.push(var);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// `KL(N(μ0, diag v0) ‖ N(μ1, diag v1))`.
pub fn diag_gaussian_kl(mu0: &[f64], v0: &[f64], mu1: &[f64], v1: &[f64]) -> f64 {
    0.5 * mu0
        .iter()
        .zip(v0)
        .zip(mu1.iter().zip(v1))
        .map(|((m0, a), (m1, b))| a / b + (m1 - m0).powi(2) / b - 1.0 + (b / a).ln())
        .sum::<f64>()
}

/// Mean over source classes of the minimum KL divergence to any target
/// class.
pub fn kl_alignment(source: &GaussianClassModel, target: &GaussianClassModel) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract(
            "kl_alignment needs fitted classes on both sides".into(),
        ));
    }
    let mins: Vec<f64> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            (0..target.len())
                .map(|j| {
                    diag_gaussian_kl(
                        &source.means[i],
                        &source.variances[i],
                        &target.means[j],
                        &target.variances[j],
                    )
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(mins.iter().sum::<f64>() / mins.len() as f64)
}

/// One projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaPoint {
    pub label: usize,
    pub u: f64,
    pub v: f64,
}

/// Projection onto the top two principal components of the centered data.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_2d(batch: &EmbeddingBatch) -> Result<Vec<PcaPoint>> {
    if batch.is_empty() {
        return Err(Error::BatchSize {
            op: "pca_2d",
            min: 3,
            got: 0,
        });
    }
    pca_2d_rows(&batch.tensor()?, &batch.labels)
}

/// [`pca_2d`] on arbitrary (not necessarily unit) rows.
pub fn pca_2d_rows(x: &Tensor, labels: &[usize]) -> Result<Vec<PcaPoint>> {
    if !x.is_matrix() || labels.len() != x.rows() {
        return Err(Error::dim("pca_2d", x.rows(), labels.len()));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < 3 || d < 2 {
        return Err(Error::BatchSize {
            op: "pca_2d",
            min: 3,
            got: n,
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| (0..n).map(|i| x.row(i)[k]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, k| x.row(i)[k] - mean[k]);
    let cov = centered.transpose() * &centered / (n as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if !(eig.eigenvalues[order[0]] > 1e-300) {
        return Err(Error::Degenerate {
            op: "pca_2d",
            detail: "all points coincide".into(),
        });
    }
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&c| {
            let col: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = col
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(1.0, |(_, v)| v);
            let s = if lead < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| s * v).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let r: Vec<f64> = centered.row(i).iter().copied().collect();
            PcaPoint {
                label: labels[i],
                u: dot(&r, &axes[0]),
                v: dot(&r, &axes[1]),
            }
        })
        .collect())
}

/// `label,u,v` CSV of [`pca_2d`].
pub fn pca_2d_dump(batch: &EmbeddingBatch) -> Result<String> {
    let mut s = String::from("label,u,v\n");
    for p in pca_2d(batch)? {
        let _ = writeln!(s, "{},{},{}", p.label, p.u, p.v);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>], labels: Vec<usize>) -> EmbeddingBatch {
        EmbeddingBatch::new(&Tensor::from_rows(rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn duplicated_points_recall_one() {
        let b = batch(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![0, 0, 1, 1],
        );
        assert_eq!(recall_at_k(&b, &[1, 2]).unwrap(), vec![1.0, 1.0]);
        assert!(recall_at_k(&b, &[4]).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        // query 0 sees rows 1 and 2 at equal similarity and takes row 1,
        // the other class; rows 1 and 2 are each other's nearest neighbour
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], vec![0, 1, 0]);
        let r = recall_at_k(&b, &[1, 2]).unwrap();
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 2.0 / 3.0);
    }

    #[test]
    fn proxy_sample_extremes() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let same = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![3, 4]);
        let s = proxy_sample_similarity(&same, &p, 3).unwrap();
        assert_eq!((s.mean, s.min), (1.0, 1.0));
        assert_eq!(s.per_class.len(), 2);
        let orth = batch(&[vec![0.0, 1.0], vec![1.0, 0.0]], vec![3, 4]);
        let s = proxy_sample_similarity(&orth, &p, 3).unwrap();
        assert_eq!((s.mean, s.min), (0.0, 0.0));
        let missing = batch(&[vec![1.0, 0.0]], vec![5]);
        assert!(proxy_sample_similarity(&missing, &p, 3).is_err());
    }

    #[test]
    fn proxy_proxy_extremes() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(proxy_proxy_similarity(&p, &p).unwrap().max, 1.0);
        let q = Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(proxy_proxy_similarity(&p, &q).unwrap().max, 0.0);
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(
            diag_gaussian_kl(&[1.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]),
            0.5
        );
        let src = GaussianClassModel {
            classes: vec![0],
            means: vec![vec![0.0, 0.0]],
            variances: vec![vec![1.0, 1.0]],
        };
        let tgt = GaussianClassModel {
            classes: vec![0, 1],
            means: vec![vec![0.0, 0.0], vec![3.0, 1.0]],
            variances: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        assert_eq!(kl_alignment(&src, &tgt).unwrap(), 0.0);
        assert_eq!(kl_alignment(&tgt, &tgt).unwrap(), 0.0);
    }

    #[test]
    fn singletons_are_excluded_from_fit() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], vec![0, 0, 1]);
        let m = GaussianClassModel::fit(&b);
        assert_eq!(m.classes, vec![0]);
        assert!(m.variances[0].iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn pca_on_axis_aligned_plane() {
        // large spread on x, smaller on y; third coordinate constant
        let pts = [(3.0, 0.5), (-3.0, 0.2), (1.0, -0.4), (-1.0, -0.3)];
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|&(x, y)| {
                let v: Vec<f64> = vec![x, y, 10.0];
                let n = dot(&v, &v).sqrt();
                v.into_iter().map(|c| c / n).collect()
            })
            .collect();
        let b = batch(&rows, vec![0, 1, 2, 3]);
        let proj = pca_2d(&b).unwrap();
        let var = |f: fn(&PcaPoint) -> f64| proj.iter().map(|p| f(p).powi(2)).sum::<f64>();
        assert!(var(|p| p.u) >= var(|p| p.v));
        let csv = pca_2d_dump(&b).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(pca_2d(&batch(&rows[..2], vec![0, 1])).is_err());
    }
}
