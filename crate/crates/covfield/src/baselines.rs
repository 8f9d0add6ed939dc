//! Classical covariance estimators used as comparison targets: per-condition
//! empirical, grand empirical, their weighted average, Ledoit-Wolf shrinkage,
//! and the graphical lasso.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which diagonal target Ledoit-Wolf shrinks towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedoitWolfTarget {
    /// `trace/N * I`, the canonical scaled-identity target.
    ScaledIdentity,
    /// Per-coordinate sample variances on the diagonal.
    DiagonalVariances,
}

/// Per-condition estimates produced by one of the classical methods.
#[derive(Debug, Clone)]
pub struct BaselineEstimate {
    pub method: String,
    pub sigmas: Vec<DMatrix<f64>>,
    /// Set per condition when the estimate is numerically singular
    /// (min eigenvalue < 1e-12 * trace / N).
    pub singular: Vec<bool>,
}

impl BaselineEstimate {
    pub fn new(method: impl Into<String>, sigmas: Vec<DMatrix<f64>>) -> Self {
        let singular = sigmas.iter().map(|s| is_singular(s)).collect();
        BaselineEstimate {
            method: method.into(),
            sigmas,
            singular,
        }
    }
}

fn is_singular(sigma: &DMatrix<f64>) -> bool {
    let n = sigma.nrows();
    let tr = sigma.trace();
    let min_eig = nalgebra::SymmetricEigen::new(sigma.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    // <= so the all-zero matrix (trace 0) is flagged too
    min_eig <= 1e-12 * tr / n as f64
}

/// Per-condition sample mean of the trial rows.
pub fn trial_mean(y: &DMatrix<f64>) -> DVector<f64> {
    let k = y.nrows() as f64;
    y.row_sum().transpose() / k
}

/// Empirical covariance with 1/K normalization: `(1/K) sum (y - ybar)(y - ybar)'`.
///
/// For K < N the result is singular by construction (rank <= K - 1); the
/// caller can detect this through [`BaselineEstimate::singular`].
pub fn empirical(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = y.nrows();
    if k == 0 {
        return Err(Error::invalid_input("empirical covariance needs K >= 1"));
    }
    let ybar = trial_mean(y);
    let n = y.ncols();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for ki in 0..k {
        let r = y.row(ki).transpose() - &ybar;
        m.syger(1.0, &r, &r, 1.0);
    }
    m /= k as f64;
    // syger fills the lower triangle; mirror it.
    for i in 0..n {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    Ok(m)
}

/// Grand covariance: all trials pooled after per-condition centering, with
/// weight `1/sum(K_c)`. Reduces to the equal-weight average of per-condition
/// empiricals when the design is balanced.
pub fn grand_empirical(trials: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if trials.is_empty() {
        return Err(Error::invalid_input("grand covariance needs >= 1 condition"));
    }
    let n = trials[0].ncols();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut total = 0usize;
    for y in trials {
        if y.ncols() != n {
            return Err(Error::dim("conditions disagree on N"));
        }
        if y.nrows() == 0 {
            return Err(Error::invalid_input("every condition needs K >= 1"));
        }
        let ybar = trial_mean(y);
        for ki in 0..y.nrows() {
            let r = y.row(ki).transpose() - &ybar;
            m.syger(1.0, &r, &r, 1.0);
        }
        total += y.nrows();
    }
    m /= total as f64;
    for i in 0..n {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    Ok(m)
}

/// `alpha * empirical(c) + (1 - alpha) * grand` for every condition.
pub fn weighted_average(trials: &[DMatrix<f64>], alpha: f64) -> Result<Vec<DMatrix<f64>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid_input(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let grand = grand_empirical(trials)?;
    trials
        .iter()
        .map(|y| {
            let emp = empirical(y)?;
            Ok(emp * alpha + &grand * (1.0 - alpha))
        })
        .collect()
}

/// Ledoit-Wolf shrinkage of one condition's sample covariance toward a
/// diagonal target, with the analytically optimal intensity clipped to [0, 1].
pub fn ledoit_wolf(y: &DMatrix<f64>, target: LedoitWolfTarget) -> Result<(DMatrix<f64>, f64)> {
    let k = y.nrows();
    let n = y.ncols();
    if k < 2 {
        return Err(Error::invalid_input("ledoit_wolf needs K >= 2"));
    }
    let sample = empirical(y)?;
    let ybar = trial_mean(y);

    let target_matrix = match target {
        LedoitWolfTarget::ScaledIdentity => {
            DMatrix::identity(n, n) * (sample.trace() / n as f64)
        }
        LedoitWolfTarget::DiagonalVariances => DMatrix::from_diagonal(&sample.diagonal()),
    };

    // Normalized squared Frobenius distances (the 1/N-scaled inner product
    // of the 2004 estimator).
    let frob = |m: &DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let d2 = frob(&(&sample - &target_matrix));
    // b_bar^2 = (1/K^2) sum_k || x_k x_k' - S ||^2 / N over centered trials.
    let mut b_bar2 = 0.0;
    for ki in 0..k {
        let r = y.row(ki).transpose() - &ybar;
        let outer = &r * r.transpose();
        b_bar2 += frob(&(&outer - &sample));
    }
    b_bar2 /= (k * k) as f64;

    let intensity = if d2 > 0.0 {
        (b_bar2.min(d2) / d2).clamp(0.0, 1.0)
    } else {
        0.0 // sample equals the target already
    };
    let shrunk = &target_matrix * intensity + &sample * (1.0 - intensity);
    Ok((shrunk, intensity))
}

/// Result of the graphical lasso.
#[derive(Debug, Clone)]
pub struct GraphicalLassoFit {
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Penalized negative log-likelihood after each sweep (nonincreasing).
    pub objective_trace: Vec<f64>,
}

/// Penalized objective: `-logdet(T) + tr(S T) + rho * sum_{i != j} |T_ij|`.
pub fn glasso_objective(s: &DMatrix<f64>, theta: &DMatrix<f64>, rho: f64) -> f64 {
    let chol = match Cholesky::new(theta.clone()) {
        Some(c) => c,
        None => return f64::INFINITY,
    };
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let trace_st = s.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
    let mut penalty = 0.0;
    let n = s.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                penalty += theta[(i, j)].abs();
            }
        }
    }
    -logdet + trace_st + rho * penalty
}

/// Sparse precision estimation by block coordinate descent on the penalized
/// Gaussian MLE in the primal, off-diagonals penalized only.
///
/// One block update jointly minimizes the objective over a whole row/column
/// of the precision matrix (an inner lasso solved by coordinate descent plus
/// a closed-form diagonal step), so the objective is nonincreasing across
/// sweeps; a violation beyond float noise is reported as an internal error.
/// Convergence is declared when the largest precision-entry change in a
/// sweep drops below 1e-6, with a 500-sweep cap; hitting the cap returns the
/// result with `converged == false`.
pub fn graphical_lasso(s: &DMatrix<f64>, rho: f64) -> Result<GraphicalLassoFit> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::dim("sample covariance must be square"));
    }
    if rho < 0.0 {
        return Err(Error::invalid_input("rho must be >= 0"));
    }
    let asym = (s - s.transpose()).abs().max();
    if asym > 1e-10 * s.abs().max().max(1.0) {
        return Err(Error::invalid_input("sample covariance must be symmetric"));
    }
    for i in 0..n {
        if s[(i, i)] <= 0.0 {
            return Err(Error::invalid_input(
                "sample covariance needs strictly positive diagonal",
            ));
        }
    }

    // Diagonal MLE start; B = Theta^{-1} is maintained alongside.
    let mut theta = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        theta[(i, i)] = 1.0 / (s[(i, i)] + rho);
        b[(i, i)] = s[(i, i)] + rho;
    }

    let mut trace = vec![glasso_objective(s, &theta, rho)];
    let mut converged = false;
    let max_sweeps = 500;
    let tol = 1e-6;
    let mut sweeps = 0;

    for _sweep in 0..max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..n {
            max_change = max_change.max(block_update(s, &mut theta, &mut b, rho, j));
        }
        let obj = glasso_objective(s, &theta, rho);
        let prev = *trace.last().unwrap();
        if obj > prev + 1e-8 * (1.0 + prev.abs()) {
            return Err(Error::Internal(format!(
                "graphical lasso objective increased: {prev} -> {obj}"
            )));
        }
        trace.push(obj);
        // Refresh the incrementally-updated inverse once per sweep so the
        // Schur-complement updates cannot accumulate rounding.
        if let Some(chol) = Cholesky::new(theta.clone()) {
            b = chol.solve(&DMatrix::identity(n, n));
        }
        if converged {
            break; // the polish sweep after the criterion fired
        }
        if max_change < tol {
            converged = true;
        }
    }

    // Fresh inverse for the returned covariance.
    let chol = Cholesky::new(theta.clone())
        .ok_or_else(|| Error::singular("graphical lasso precision"))?;
    let covariance = chol.solve(&DMatrix::identity(n, n));
    Ok(GraphicalLassoFit {
        covariance,
        precision: theta,
        converged,
        sweeps,
        objective_trace: trace,
    })
}

/// Jointly minimize the objective over column/row `j` of the precision.
///
/// With Theta partitioned around index j, det(Theta) factorizes as
/// det(Theta_11) * (theta_jj - t12' Theta_11^{-1} t12), so the block
/// subproblem separates into a lasso in t12 with quadratic form
/// S_jj * Theta_11^{-1}, and the closed-form gap theta_jj - quad = 1/S_jj.
/// Theta_11^{-1} is read off the maintained full inverse via a Schur
/// complement, and the inverse is refreshed blockwise afterwards.
/// Returns the largest entry change.
fn block_update(
    s: &DMatrix<f64>,
    theta: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
    rho: f64,
    j: usize,
) -> f64 {
    let n = s.nrows();
    if n == 1 {
        let new = 1.0 / s[(0, 0)];
        let change = (new - theta[(0, 0)]).abs();
        theta[(0, 0)] = new;
        b[(0, 0)] = s[(0, 0)];
        return change;
    }
    let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
    let m = n - 1;

    // Theta_11^{-1} = B_11 - b12 b12' / b22.
    let b22 = b[(j, j)];
    let mut theta11_inv = DMatrix::<f64>::zeros(m, m);
    for (ri, &r) in others.iter().enumerate() {
        for (ci, &c) in others.iter().enumerate() {
            theta11_inv[(ri, ci)] = b[(r, c)] - b[(r, j)] * b[(c, j)] / b22;
        }
    }

    let s22 = s[(j, j)];
    let s12 = DVector::<f64>::from_fn(m, |k, _| s[(others[k], j)]);
    // Inner lasso: minimize s22 * t' Theta11inv t + 2 s12' t + 2 rho |t|_1.
    let q = &theta11_inv * s22;
    let mut t = DVector::<f64>::from_fn(m, |k, _| theta[(others[k], j)]);
    let mut qt = &q * &t;
    let scale = s.abs().max().max(1.0);
    for _pass in 0..200 {
        let mut inner_change: f64 = 0.0;
        for k in 0..m {
            let qkk = q[(k, k)];
            let resid = s12[k] + qt[k] - qkk * t[k];
            let new = soft_threshold(-resid, rho) / qkk;
            let delta = new - t[k];
            if delta != 0.0 {
                inner_change = inner_change.max(delta.abs());
                qt.axpy(delta, &q.column(k).into_owned(), 1.0);
                t[k] = new;
            }
        }
        if inner_change < 1e-10 * scale {
            break;
        }
    }

    // v = Theta11inv * t; diagonal gap is exactly 1/S_jj.
    let v = &qt / s22;
    let quad = t.dot(&v);
    let theta_jj_new = 1.0 / s22 + quad;

    let mut max_change = (theta_jj_new - theta[(j, j)]).abs();
    for (k, &r) in others.iter().enumerate() {
        max_change = max_change.max((t[k] - theta[(r, j)]).abs());
        theta[(r, j)] = t[k];
        theta[(j, r)] = t[k];
    }
    theta[(j, j)] = theta_jj_new;

    // Blockwise inverse refresh: b22' = S_jj, b12' = -v S_jj,
    // B_11' = Theta11inv + v v' S_jj.
    b[(j, j)] = s22;
    for (k, &r) in others.iter().enumerate() {
        let val = -v[k] * s22;
        b[(r, j)] = val;
        b[(j, r)] = val;
    }
    for (ri, &r) in others.iter().enumerate() {
        for (ci, &c) in others.iter().enumerate() {
            b[(r, c)] = theta11_inv[(ri, ci)] + v[ri] * v[ci] * s22;
        }
    }
    max_change
}

fn soft_threshold(x: f64, thresh: f64) -> f64 {
    if x > thresh {
        x - thresh
    } else if x < -thresh {
        x + thresh
    } else {
        0.0
    }
}
