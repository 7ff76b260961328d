//! Least squares over the probability simplex.
//!
//! The inner synthetic-control problem
//!
//! ```text
//! min_w  sum_k v_k (x1_k - (X0 w)_k)^2   s.t.  w >= 0, sum w = 1
//! ```
//!
//! is the nearest point to the origin in the convex hull of the shifted and
//! scaled donor columns `p_j = sqrt(v) * (X0_j - x1)`. The default solver is
//! Wolfe's minimum-norm-point method, a fully corrective conditional-gradient
//! scheme that terminates with an exact active set. Projected gradient is kept
//! as an alternative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ScmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    #[default]
    MinNormPoint,
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub solver: InnerSolver,
    pub max_iter: usize,
    /// Projected gradient stops once the objective improves by less than this.
    pub tol: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            solver: InnerSolver::MinNormPoint,
            max_iter: 10_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Euclidean projection onto `{x : x >= 0, sum x = 1}` (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Clamps tiny negatives and rescales to sum exactly one (up to rounding).
pub fn renormalize(w: &mut [f64]) {
    for x in w.iter_mut() {
        if *x < 0.0 || !x.is_finite() {
            *x = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        for x in w.iter_mut() {
            *x /= s;
        }
    } else if !w.is_empty() {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|x| *x = u);
    }
}

/// `sum_k v_k (x1_k - (X0 w)_k)^2` with `X0` stored predictors x donors.
pub fn weighted_objective(x1: &[f64], x0: &DMatrix<f64>, v: &[f64], w: &[f64]) -> f64 {
    (0..x1.len())
        .map(|k| {
            let fit: f64 = (0..x0.ncols()).map(|j| x0[(k, j)] * w[j]).sum();
            v[k] * (x1[k] - fit).powi(2)
        })
        .sum()
}

/// Donor weights minimizing the v-weighted predictor discrepancy.
pub fn inner_weights(
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    config: &InnerConfig,
) -> Result<InnerSolution, ScmError> {
    inner_weights_from(x1, x0, v, config, &[])
}

/// Like [`inner_weights`], starting the active-set solver from the support
/// of a previous solution.
pub fn inner_weights_from(
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    config: &InnerConfig,
    support: &[usize],
) -> Result<InnerSolution, ScmError> {
    let k = x1.len();
    if x0.ncols() == 0 {
        return Err(ScmError::NoDonors);
    }
    if x0.nrows() != k || v.len() != k {
        return Err(ScmError::DimensionMismatch(format!(
            "treated has {k} predictors, donor matrix has {} rows, v has {} entries",
            x0.nrows(),
            v.len()
        )));
    }
    if v.iter().any(|&x| x.is_nan() || x < 0.0) {
        return Err(ScmError::DimensionMismatch(
            "predictor weights must be non-negative".into(),
        ));
    }
    let points = DMatrix::from_fn(k, x0.ncols(), |r, c| v[r].sqrt() * (x0[(r, c)] - x1[r]));
    let (mut w, iterations) = match config.solver {
        InnerSolver::MinNormPoint => min_norm_point(&points, config.max_iter, support),
        InnerSolver::ProjectedGradient => projected_gradient(&points, config.max_iter, config.tol),
    };
    renormalize(&mut w);
    let objective = norm_sq_combination(&points, &w);
    Ok(InnerSolution {
        w,
        objective,
        iterations,
    })
}

fn norm_sq_combination(points: &DMatrix<f64>, w: &[f64]) -> f64 {
    let mut x = DVector::zeros(points.nrows());
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            x.axpy(wj, &points.column(j), 1.0);
        }
    }
    x.norm_squared()
}

fn combination(points: &DMatrix<f64>, active: &[usize], lambda: &[f64]) -> DVector<f64> {
    let mut x = DVector::zeros(points.nrows());
    for (&j, &l) in active.iter().zip(lambda) {
        x.axpy(l, &points.column(j), 1.0);
    }
    x
}

/// Minimum-norm point of the convex hull of the columns of `points`.
/// Returns convex weights per column and the number of major iterations.
pub(crate) fn min_norm_point(points: &DMatrix<f64>, max_iter: usize, support: &[usize]) -> (Vec<f64>, usize) {
    let m = points.ncols();
    let norms: Vec<f64> = (0..m).map(|j| points.column(j).norm_squared()).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let nearest = (0..m)
        .min_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .expect("at least one point");

    let mut active: Vec<usize> = Vec::new();
    for &j in support {
        if j < m && !active.contains(&j) {
            active.push(j);
        }
    }
    let mut lambda = vec![1.0 / active.len().max(1) as f64; active.len()];
    if active.len() < 2 || minor_cycle(points, &mut active, &mut lambda).is_err() {
        active = vec![nearest];
        lambda = vec![1.0];
    }
    let mut x = combination(points, &active, &lambda);
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let xx = x.norm_squared();
        if xx <= 1e-300 {
            break;
        }
        // linear minimization oracle
        let mut best = 0;
        let mut best_dot = f64::INFINITY;
        for j in 0..m {
            let d = points.column(j).dot(&x);
            if d < best_dot {
                best_dot = d;
                best = j;
            }
        }
        if xx - best_dot <= 1e-13 * scale || active.contains(&best) {
            break;
        }
        active.push(best);
        lambda.push(0.0);
        let stalled = minor_cycle(points, &mut active, &mut lambda).is_err();
        if stalled {
            // newest point numerically inside the affine hull
            active.pop();
            lambda.pop();
        }
        x = combination(points, &active, &lambda);
        if stalled {
            break;
        }
    }

    let mut w = vec![0.0; m];
    for (&j, &l) in active.iter().zip(&lambda) {
        w[j] = l;
    }
    (w, iterations)
}

/// Moves the convex combination `lambda` towards the affine minimizer of the
/// active points, stepping back into the simplex and dropping points
/// whenever it leaves the hull. Fails without modifying anything when the
/// active points are affinely dependent on entry.
fn minor_cycle(points: &DMatrix<f64>, active: &mut Vec<usize>, lambda: &mut Vec<f64>) -> Result<(), ()> {
    let mut first = true;
    loop {
        let alpha = match affine_minimizer(points, active) {
            Some(a) => a,
            None if first => return Err(()),
            None => {
                // affinely dependent after dropping is impossible; keep the
                // current convex combination
                return Ok(());
            }
        };
        first = false;
        if alpha.iter().all(|&a| a > 1e-14) {
            *lambda = alpha;
            return Ok(());
        }
        let mut theta = f64::INFINITY;
        let mut blocking = 0;
        for (i, &a) in alpha.iter().enumerate() {
            if a <= 1e-14 {
                let denom = lambda[i] - a;
                let t = if denom > 0.0 { lambda[i] / denom } else { 0.0 };
                if t < theta {
                    theta = t;
                    blocking = i;
                }
            }
        }
        let theta = theta.clamp(0.0, 1.0);
        for (l, a) in lambda.iter_mut().zip(&alpha) {
            *l = theta * a + (1.0 - theta) * *l;
        }
        lambda[blocking] = 0.0;
        let mut i = 0;
        while i < active.len() {
            if lambda[i] <= 1e-14 {
                active.remove(i);
                lambda.remove(i);
            } else {
                i += 1;
            }
        }
        let s: f64 = lambda.iter().sum();
        lambda.iter_mut().for_each(|l| *l /= s);
        if active.len() == 1 {
            lambda[0] = 1.0;
            return Ok(());
        }
    }
}

/// Affine combination of the active points with minimum norm:
/// `min ||P a||^2  s.t.  sum a = 1`.
fn affine_minimizer(points: &DMatrix<f64>, active: &[usize]) -> Option<Vec<f64>> {
    let s = active.len();
    if s == 1 {
        return Some(vec![1.0]);
    }
    let k = points.nrows();
    if s - 1 > k {
        return None;
    }
    // Work relative to the first point: a = e_0 + B c with c free,
    // minimizing ||p_0 + D c||^2 where D_i = p_i - p_0.
    let p0 = points.column(active[0]);
    let d = DMatrix::from_fn(k, s - 1, |r, c| points[(r, active[c + 1])] - p0[r]);
    let qr = d.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..s - 1).map(|i| r[(i, i)].abs()).collect();
    let max_d = diag.iter().copied().fold(0.0, f64::max);
    if max_d == 0.0 || diag.iter().any(|&x| x <= 1e-10 * max_d) {
        return None;
    }
    let rhs = -(qr.q().transpose() * p0);
    let c = r.solve_upper_triangular(&rhs)?;
    let mut a = Vec::with_capacity(s);
    a.push(1.0 - c.iter().sum::<f64>());
    a.extend(c.iter().copied());
    Some(a)
}

/// Accelerated projected gradient with adaptive restart.
fn projected_gradient(points: &DMatrix<f64>, max_iter: usize, tol: f64) -> (Vec<f64>, usize) {
    let m = points.ncols();
    let gram = points.transpose() * points;
    // Lipschitz constant of grad ||P w||^2 = 2 P'P w
    let lipschitz = 2.0 * largest_eigenvalue(&gram).max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;
    let f = |w: &DVector<f64>| (points * w).norm_squared();

    let mut w = DVector::from_element(m, 1.0 / m as f64);
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut fw = f(&w);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let grad = 2.0 * (&gram * &y);
        let cand: Vec<f64> = (y.clone() - step * grad).iter().copied().collect();
        let next = DVector::from_vec(project_simplex(&cand));
        let f_next = f(&next);
        if f_next > fw {
            // restart momentum from the last accepted iterate
            y = w.clone();
            t = 1.0;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + ((t - 1.0) / t_next) * (&next - &w);
        t = t_next;
        let improvement = fw - f_next;
        w = next;
        fw = f_next;
        if improvement < tol && iterations > 1 {
            break;
        }
    }
    (w.iter().copied().collect(), iterations)
}

fn largest_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    let n = sym.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let av = sym * &v;
        let norm = av.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = av / norm;
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // power iteration underestimates; pad slightly so the step stays safe
    lambda * 1.01
}
