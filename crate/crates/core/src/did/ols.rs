//! Least squares with heteroskedasticity- and cluster-robust covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeType {
    #[default]
    Hc1,
    ClusterByUnit,
}

#[derive(Debug, Clone)]
pub(crate) struct OlsFit {
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub r_squared: f64,
    pub df_resid: usize,
    pub n_clusters: usize,
}

/// Columns whose pivot in the QR factorization is negligible, i.e. which
/// are (numerically) spanned by earlier columns.
pub(crate) fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    // Gram-Schmidt against the accepted columns, in order
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&r);
                r.axpy(-d, q, 1.0);
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-10 * norm {
            out.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    out
}

/// OLS of `y` on full-rank `x`. `clusters[i]` identifies the cluster of
/// observation `i` and is only read for cluster-robust errors.
pub(crate) fn ols(x: &DMatrix<f64>, y: &DVector<f64>, se: SeType, clusters: &[usize]) -> OlsFit {
    let n = x.nrows();
    let k = x.ncols();
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let beta = r.solve_upper_triangular(&qty).expect("full rank design");
    let residuals = y - x * &beta;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .expect("full rank design");
    let xtx_inv = &r_inv * r_inv.transpose();

    let mut meat = DMatrix::zeros(k, k);
    let n_clusters;
    match se {
        SeType::Hc1 => {
            for i in 0..n {
                let xi = x.row(i).transpose();
                meat += (residuals[i] * residuals[i]) * &xi * xi.transpose();
            }
            meat *= n as f64 / (n - k).max(1) as f64;
            n_clusters = n;
        }
        SeType::ClusterByUnit => {
            let g = clusters.iter().copied().max().map_or(0, |m| m + 1);
            let mut scores = DMatrix::<f64>::zeros(g, k);
            for i in 0..n {
                for j in 0..k {
                    scores[(clusters[i], j)] += residuals[i] * x[(i, j)];
                }
            }
            let mut present = vec![false; g];
            clusters[..n].iter().for_each(|&c| present[c] = true);
            n_clusters = present.iter().filter(|&&p| p).count();
            for c in (0..g).filter(|&c| present[c]) {
                let s = scores.row(c).transpose();
                meat += &s * s.transpose();
            }
            let gf = n_clusters as f64;
            let adj = if n_clusters > 1 {
                gf / (gf - 1.0) * (n as f64 - 1.0) / (n - k).max(1) as f64
            } else {
                1.0
            };
            meat *= adj;
        }
    }
    let cov = &xtx_inv * meat * &xtx_inv;

    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ssr = residuals.norm_squared();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    OlsFit {
        beta,
        cov,
        r_squared,
        df_resid: n.saturating_sub(k),
        n_clusters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(5, |i, _| 2.0 + 0.5 * i as f64);
        let f = ols(&x, &y, SeType::Hc1, &[]);
        assert!((f.beta[0] - 2.0).abs() < 1e-14 && (f.beta[1] - 0.5).abs() < 1e-14);
        assert!(f.cov.iter().all(|v| v.abs() < 1e-25));
        assert!((f.r_squared - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hc1_matches_closed_form_for_mean() {
        // regression on a constant: HC1 variance = n/(n-1) * sum e^2 / n^2
        let y = DVector::from_vec(vec![1.0, 4.0, 2.0, 7.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let f = ols(&x, &y, SeType::Hc1, &[]);
        let mean = 3.5;
        let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let expected = 4.0 / 3.0 * ss / 16.0;
        assert!((f.cov[(0, 0)] - expected).abs() < 1e-14);
    }

    #[test]
    fn cluster_with_singletons_equals_hc1() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { (i * i) as f64 });
        let y = DVector::from_vec(vec![1.0, 0.5, 3.0, 8.0, 17.5, 24.0]);
        let hc1 = ols(&x, &y, SeType::Hc1, &[]);
        let cl = ols(&x, &y, SeType::ClusterByUnit, &[0, 1, 2, 3, 4, 5]);
        // CR1 with n singleton clusters: n/(n-1) * (n-1)/(n-k) * HC0 = HC1
        let ratio = cl.cov[(1, 1)] / hc1.cov[(1, 1)];
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detects_collinear_column() {
        let x = DMatrix::from_fn(4, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 3.0 - 2.0 * i as f64,
        });
        assert_eq!(collinear_columns(&x), vec![2]);
    }
}
