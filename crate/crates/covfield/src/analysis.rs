//! Downstream consumers of moment fields: Gaussian maximum-likelihood
//! decoding (QDA/LDA), Fisher information along condition axes, and the
//! comparison metrics used throughout the experiments.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::inference::Posterior;
use crate::posterior::{posterior_gradients, GradientSamples};

/// Per-class Gaussian classifier. QDA stores one covariance per class, LDA a
/// single shared one (linear decision boundaries follow).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminantMode {
    Qda,
    Lda,
}

pub struct ClassModel {
    means: Vec<DVector<f64>>,
    /// One factor per class (QDA) or exactly one shared factor (LDA).
    factors: Vec<Cholesky<f64, Dyn>>,
    log_dets: Vec<f64>,
    mode: DiscriminantMode,
}

impl ClassModel {
    /// QDA model from per-class moments. Factorization failure names the
    /// offending class.
    pub fn qda(means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.is_empty() || means.len() != covariances.len() {
            return Err(Error::invalid_input(
                "QDA needs one mean and one covariance per class",
            ));
        }
        let mut factors = Vec::with_capacity(covariances.len());
        let mut log_dets = Vec::with_capacity(covariances.len());
        for (ci, cov) in covariances.iter().enumerate() {
            let chol = Cholesky::new(cov.clone())
                .ok_or_else(|| Error::singular(format!("class {ci} covariance")))?;
            log_dets.push(chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0);
            factors.push(chol);
        }
        Ok(ClassModel {
            means,
            factors,
            log_dets,
            mode: DiscriminantMode::Qda,
        })
    }

    /// LDA model: shared covariance across classes.
    pub fn lda(means: Vec<DVector<f64>>, shared: DMatrix<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::invalid_input("LDA needs at least one class"));
        }
        let chol = Cholesky::new(shared)
            .ok_or_else(|| Error::singular("shared covariance"))?;
        let log_det = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        Ok(ClassModel {
            means,
            factors: vec![chol],
            log_dets: vec![log_det],
            mode: DiscriminantMode::Lda,
        })
    }

    pub fn mode(&self) -> DiscriminantMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    fn log_density(&self, class: usize, y: &DVector<f64>) -> f64 {
        let (factor, log_det) = match self.mode {
            DiscriminantMode::Qda => (&self.factors[class], self.log_dets[class]),
            DiscriminantMode::Lda => (&self.factors[0], self.log_dets[0]),
        };
        let resid = y - &self.means[class];
        let w = factor
            .l_dirty()
            .solve_lower_triangular(&resid)
            .expect("factor has positive diagonal");
        let n = y.len() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + w.norm_squared())
    }

    /// Maximum-likelihood class of a single response; ties break to the
    /// lowest class index.
    pub fn classify(&self, y: &DVector<f64>) -> Result<usize> {
        if y.len() != self.means[0].len() {
            return Err(Error::dim("response dimensionality mismatch"));
        }
        let mut best = 0usize;
        let mut best_ll = f64::NEG_INFINITY;
        for c in 0..self.means.len() {
            let ll = self.log_density(c, y);
            if ll > best_ll {
                best_ll = ll;
                best = c;
            }
        }
        Ok(best)
    }

    /// Mean 0/1 accuracy over labeled trials.
    pub fn decode_accuracy(&self, trials: &[(DVector<f64>, usize)]) -> Result<f64> {
        if trials.is_empty() {
            return Err(Error::invalid_input("empty test set"));
        }
        let mut hits = 0usize;
        for (y, label) in trials {
            if *label >= self.means.len() {
                return Err(Error::invalid_input(format!(
                    "label {label} outside {} classes",
                    self.means.len()
                )));
            }
            if self.classify(y)? == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / trials.len() as f64)
    }

    /// Per-class confusion counts: entry (true, predicted).
    pub fn confusion(&self, trials: &[(DVector<f64>, usize)]) -> Result<DMatrix<usize>> {
        if trials.is_empty() {
            return Err(Error::invalid_input("empty test set"));
        }
        let c = self.means.len();
        let mut m = DMatrix::<usize>::zeros(c, c);
        for (y, label) in trials {
            if *label >= c {
                return Err(Error::invalid_input(format!("label {label} out of range")));
            }
            m[(*label, self.classify(y)?)] += 1;
        }
        Ok(m)
    }
}

/// Which form of the covariance enters the FI formula.
pub enum CovarianceInput<'a> {
    Covariance(&'a DMatrix<f64>),
    /// Precision supplied directly (inverse variant); no solve needed.
    Precision(&'a DMatrix<f64>),
}

/// Gaussian Fisher information along one scalar condition axis:
/// `mu'-term + 0.5 tr([Sigma^-1 Sigma']^2)`.
///
/// Both terms are evaluated through triangular factors as squared Frobenius
/// norms, so the result is nonnegative by construction whenever the
/// covariance (or precision) is SPD and `Sigma'` symmetric.
pub fn fisher_information(
    mean_grad: &DVector<f64>,
    cov: CovarianceInput<'_>,
    cov_grad: &DMatrix<f64>,
) -> Result<f64> {
    let n = mean_grad.len();
    if cov_grad.nrows() != n || cov_grad.ncols() != n {
        return Err(Error::dim("covariance derivative must be N x N"));
    }
    let asym = (cov_grad - cov_grad.transpose()).abs().max();
    if asym > 1e-8 * cov_grad.abs().max().max(1.0) {
        return Err(Error::invalid_input("covariance derivative must be symmetric"));
    }
    match cov {
        CovarianceInput::Covariance(sigma) => {
            if sigma.nrows() != n || sigma.ncols() != n {
                return Err(Error::dim("covariance must be N x N"));
            }
            let chol = Cholesky::new(sigma.clone())
                .ok_or_else(|| Error::singular("covariance in Fisher information"))?;
            let lower = chol.l();
            // mean term: || L^-1 mu' ||^2
            let w = lower
                .solve_lower_triangular(mean_grad)
                .ok_or_else(|| Error::singular("covariance in Fisher information"))?;
            let mean_term = w.norm_squared();
            // covariance term: 0.5 || L^-1 Sigma' L^-T ||_F^2
            let half = lower
                .solve_lower_triangular(cov_grad)
                .ok_or_else(|| Error::singular("covariance in Fisher information"))?;
            let full = lower
                .solve_lower_triangular(&half.transpose())
                .ok_or_else(|| Error::singular("covariance in Fisher information"))?;
            let cov_term = 0.5 * full.iter().map(|v| v * v).sum::<f64>();
            Ok(mean_term + cov_term)
        }
        CovarianceInput::Precision(prec) => {
            if prec.nrows() != n || prec.ncols() != n {
                return Err(Error::dim("precision must be N x N"));
            }
            let chol = Cholesky::new(prec.clone())
                .ok_or_else(|| Error::singular("precision in Fisher information"))?;
            let lower = chol.l();
            // mean term: mu'ops P mu' = || L' mu' ||^2 with P = L L'
            let mean_term = (lower.transpose() * mean_grad).norm_squared();
            // tr([P Sigma']^2) = || L' Sigma' L ||_F^2
            let m = lower.transpose() * cov_grad * &lower;
            let cov_term = 0.5 * m.iter().map(|v| v * v).sum::<f64>();
            Ok(mean_term + cov_term)
        }
    }
}

/// FI draws at one evaluation point with a summary.
#[derive(Debug, Clone)]
pub struct FisherEstimate {
    pub x: Vec<f64>,
    pub axis: usize,
    pub draws: Vec<f64>,
    pub mean: f64,
    /// Central 90% interval of the draws.
    pub interval: (f64, f64),
}

impl FisherEstimate {
    fn from_draws(x: Vec<f64>, axis: usize, mut draws: Vec<f64>) -> Self {
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| {
            let idx = ((draws.len() - 1) as f64 * f).round() as usize;
            draws[idx]
        };
        let interval = (q(0.05), q(0.95));
        FisherEstimate {
            x,
            axis,
            draws,
            mean,
            interval,
        }
    }
}

/// Sampled Fisher information curve along an axis over evaluation points:
/// each posterior gradient draw is pushed through [`fisher_information`].
pub fn fisher_curve(
    post: &Posterior,
    eval_points: &[Vec<f64>],
    axis: usize,
    s: usize,
    seed: u64,
) -> Result<Vec<FisherEstimate>> {
    let mut out = Vec::with_capacity(eval_points.len());
    for (pi, x) in eval_points.iter().enumerate() {
        let gs = posterior_gradients(post, x, axis, s, crate::util::derive_seed(seed, pi as u64))?;
        out.push(fisher_estimate_from_gradients(&gs)?);
    }
    Ok(out)
}

/// FI draws from already-sampled posterior gradients.
pub fn fisher_estimate_from_gradients(gs: &GradientSamples) -> Result<FisherEstimate> {
    let mut draws = Vec::with_capacity(gs.draws.len());
    for d in &gs.draws {
        let cov = match &d.precision {
            Some(p) => CovarianceInput::Precision(p),
            None => CovarianceInput::Covariance(&d.cov),
        };
        draws.push(fisher_information(&d.mean_grad, cov, &d.cov_grad)?);
    }
    Ok(FisherEstimate::from_draws(
        gs.x_star.clone(),
        gs.axis,
        draws,
    ))
}

/// Mean-term-only FI (grand-empirical style: the covariance derivative is
/// ignored).
pub fn fisher_estimate_mean_term_only(gs: &GradientSamples) -> Result<FisherEstimate> {
    let zero = DMatrix::<f64>::zeros(
        gs.draws[0].cov.nrows(),
        gs.draws[0].cov.ncols(),
    );
    let mut draws = Vec::with_capacity(gs.draws.len());
    for d in &gs.draws {
        let cov = match &d.precision {
            Some(p) => CovarianceInput::Precision(p),
            None => CovarianceInput::Covariance(&d.cov),
        };
        draws.push(fisher_information(&d.mean_grad, cov, &zero)?);
    }
    Ok(FisherEstimate::from_draws(
        gs.x_star.clone(),
        gs.axis,
        draws,
    ))
}

/// Largest singular value of A - B for symmetric inputs (max |eigenvalue|).
pub fn operator_norm_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::dim("operator norm needs equal square shapes"));
    }
    let diff = a - b;
    let max_abs = diff.abs().max().max(1.0);
    if (&diff - diff.transpose()).abs().max() > 1e-9 * max_abs {
        return Err(Error::invalid_input("operator_norm_error expects symmetric inputs"));
    }
    Ok(nalgebra::SymmetricEigen::new(diff)
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &e| acc.max(e.abs())))
}

/// Participation ratio `(sum lambda)^2 / sum lambda^2`; for PSD input this is
/// `trace^2 / ||Sigma||_F^2`.
pub fn participation_ratio(sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::dim("participation ratio needs a square matrix"));
    }
    let tr = sigma.trace();
    let frob2 = sigma.iter().map(|v| v * v).sum::<f64>();
    if frob2 == 0.0 {
        return Err(Error::invalid_input(
            "participation ratio undefined for the zero matrix",
        ));
    }
    Ok(tr * tr / frob2)
}
