//! Posterior predictive evaluation: moments at seen and unseen conditions,
//! joint value/derivative sampling for downstream Fisher-information work,
//! held-out likelihoods, and Poisson-space summary statistics.
//!
//! Interpolation conditions each scalar latent curve on *sampled* values at
//! the training conditions (a fast plug-in mode that conditions on the
//! variational means is provided separately; it is a point estimate, not a
//! Bayesian quantity). If a requested condition coincides exactly with a
//! training condition, the latent values there are used directly, so
//! delta-family predictions at training conditions reproduce the fitted
//! moments exactly.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::ConditionGrid;
use crate::inference::{GramPair, Posterior};
use crate::kernels::ProductKernel;
use crate::model::{
    assemble_parts, loglik_normal, loglik_normal_precision, loglik_poisson_given_gain,
    CovarianceVariant, LatentState, Observation,
};
use crate::util::{log_mean_exp, logistic, rng_for_task, softplus};

/// One posterior draw of the moments at a requested condition.
#[derive(Debug, Clone)]
pub struct MomentDraw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Present for the inverse variant, where the precision is primal.
    pub precision: Option<DMatrix<f64>>,
}

/// Posterior draws of (mean, covariance) at one condition.
#[derive(Debug, Clone)]
pub struct MomentSamples {
    pub x_star: Vec<f64>,
    pub seed: u64,
    pub draws: Vec<MomentDraw>,
    /// How many draws needed the diagonal lift to restore positive
    /// definiteness (see module docs; tracked, never silent).
    pub lift_count: usize,
}

/// One joint draw of moments and their derivative along an axis.
#[derive(Debug, Clone)]
pub struct GradientDraw {
    pub mean: DVector<f64>,
    pub mean_grad: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_grad: DMatrix<f64>,
    pub precision: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct GradientSamples {
    pub x_star: Vec<f64>,
    pub axis: usize,
    pub seed: u64,
    pub draws: Vec<GradientDraw>,
    pub lift_count: usize,
}

/// How to score held-out data.
#[derive(Debug, Clone, Copy)]
pub enum HeldoutMode {
    /// One posterior sample, Normal log-densities summed over test trials.
    SingleSample { seed: u64 },
    /// log-mean-exp over per-sample totals.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonStatistic {
    Mean,
    Covariance,
}

/// Noiseless GP conditioning of one zero-mean scalar curve:
/// `mean = k*' K^-1 v`, `var = k(x*,x*) - k*' K^-1 k*`.
pub fn condition_gp(
    kernel: &ProductKernel,
    x_train: &[Vec<f64>],
    values: &[f64],
    x_star: &[f64],
) -> Result<(f64, f64)> {
    if values.len() != x_train.len() {
        return Err(Error::dim("one value per training point required"));
    }
    let gram = kernel.gram(x_train)?;
    let factor = gram.factorize()?;
    let k_star = kernel.cross(x_train, x_star)?;
    let w = factor.solve_vector(&k_star);
    let v = DVector::from_column_slice(values);
    let mean = w.dot(&v);
    let var = (kernel.diag_value() - k_star.dot(&w)).max(0.0);
    Ok((mean, var))
}

/// Conditioning weights for one kernel family at one x*, shared by every
/// scalar latent curve of that family.
struct CurveConditioner {
    w: DVector<f64>,
    var: f64,
}

impl CurveConditioner {
    fn new(
        kernel: &ProductKernel,
        factor: &crate::kernels::GramFactor,
        points: &[Vec<f64>],
        x_star: &[f64],
    ) -> Result<Self> {
        let k_star = kernel.cross(points, x_star)?;
        let w = factor.solve_vector(&k_star);
        let var = (kernel.diag_value() - k_star.dot(&w)).max(0.0);
        Ok(CurveConditioner { w, var })
    }

    fn mean(&self, values: &DVector<f64>) -> f64 {
        self.w.dot(values)
    }
}

/// Joint (value, derivative) conditioning weights along one axis.
pub struct JointConditioner {
    w: DVector<f64>,
    wd: DVector<f64>,
    /// Conditional covariance of (f, f') given the training values.
    pub cov: [[f64; 2]; 2],
}

impl JointConditioner {
    pub fn new(
        kernel: &ProductKernel,
        factor: &crate::kernels::GramFactor,
        points: &[Vec<f64>],
        x_star: &[f64],
        axis: usize,
    ) -> Result<Self> {
        let k_star = kernel.cross(points, x_star)?;
        let (d_star, d2) = kernel.gram_derivatives(points, x_star, axis)?;
        let w = factor.solve_vector(&k_star);
        let wd = factor.solve_vector(&d_star);
        let c12 = kernel.d_dx2(x_star, x_star, axis)?;
        let cov = [
            [
                (kernel.diag_value() - k_star.dot(&w)).max(0.0),
                c12 - k_star.dot(&wd),
            ],
            [c12 - d_star.dot(&w), (d2 - d_star.dot(&wd)).max(0.0)],
        ];
        Ok(JointConditioner { w, wd, cov })
    }

    pub fn conditional_mean(&self, values: &DVector<f64>) -> (f64, f64) {
        (self.w.dot(values), self.wd.dot(values))
    }

    /// Lower Cholesky-like factor of the (possibly semidefinite) 2x2
    /// conditional covariance.
    fn factor2(&self) -> [[f64; 2]; 2] {
        let a = self.cov[0][0].max(0.0).sqrt();
        let b = if a > 0.0 {
            0.5 * (self.cov[0][1] + self.cov[1][0]) / a
        } else {
            0.0
        };
        let d = (self.cov[1][1] - b * b).max(0.0).sqrt();
        [[a, 0.0], [b, d]]
    }
}

struct LatentColumns<'a> {
    latents: &'a LatentState,
}

impl<'a> LatentColumns<'a> {
    fn mu_col(&self, n: usize) -> DVector<f64> {
        self.latents.mu.column(n).into_owned()
    }
    fn u_col(&self, n: usize, p: usize) -> DVector<f64> {
        DVector::from_fn(self.latents.u.len(), |c, _| self.latents.u[c][(n, p)])
    }
    fn z_col(&self, n: usize) -> DVector<f64> {
        let z = self.latents.z.as_ref().unwrap();
        z.column(n).into_owned()
    }
}

/// Min-eigenvalue floor: lift a numerically non-SPD matrix to
/// 1e-8 * trace / N on the diagonal. Returns true when a lift happened.
fn lift_if_needed(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows();
    let tr = m.trace();
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = tr.abs().max(f64::MIN_POSITIVE) / n as f64;
    if min_eig < 1e-10 * floor {
        let delta = 1e-8 * floor - min_eig;
        for i in 0..n {
            m[(i, i)] += delta;
        }
        true
    } else {
        false
    }
}

/// Assemble the moment draw at x* from interpolated latent values, applying
/// the tracked diagonal lift to the invertible core when necessary.
fn assemble_draw(
    post: &Posterior,
    mu_star: DVector<f64>,
    u_star: DMatrix<f64>,
    z_star: Option<DVector<f64>>,
    lifts: &mut usize,
) -> Result<MomentDraw> {
    let spec = &post.spec;
    let l = post.state.scale_factor();
    let n = spec.n;

    // Build the core matrix (Sigma, or the precision B for the inverse
    // variant) directly so the lift can act on it before any inversion.
    let mut a = &u_star * u_star.transpose();
    match (spec.variant, spec.use_diag) {
        (CovarianceVariant::Vanilla, _) => {}
        (_, true) => {
            let z = z_star.as_ref().ok_or_else(|| {
                Error::Internal("diagonal field missing in draw".into())
            })?;
            for i in 0..n {
                a[(i, i)] += softplus(z[i]);
            }
        }
        (_, false) => {
            for i in 0..n {
                a[(i, i)] += 1.0;
            }
        }
    }
    let mut core = match spec.variant {
        CovarianceVariant::Vanilla | CovarianceVariant::Lrd => a,
        CovarianceVariant::ScaledLrd | CovarianceVariant::InverseScaledLrd => {
            let m = &l * a * l.transpose();
            0.5 * (&m + m.transpose())
        }
    };
    if lift_if_needed(&mut core) {
        *lifts += 1;
    }
    if spec.variant == CovarianceVariant::InverseScaledLrd {
        let chol = Cholesky::new(core.clone())
            .ok_or_else(|| Error::singular("interpolated precision"))?;
        let sigma = chol.solve(&DMatrix::identity(n, n));
        Ok(MomentDraw {
            mean: mu_star,
            cov: 0.5 * (&sigma + sigma.transpose()),
            precision: Some(core),
        })
    } else {
        Ok(MomentDraw {
            mean: mu_star,
            cov: core,
            precision: None,
        })
    }
}

/// Moment draw at x* given one latent draw at the training conditions:
/// either read off an exact grid match or condition every scalar curve and
/// draw its value at x*.
fn draw_at(
    post: &Posterior,
    latents: &LatentState,
    x_star: &[f64],
    cond_mu: Option<&CurveConditioner>,
    cond_sig: Option<&CurveConditioner>,
    rng: &mut rand_chacha::ChaCha8Rng,
    deterministic: bool,
    lifts: &mut usize,
) -> Result<MomentDraw> {
    let spec = &post.spec;
    let n = spec.n;
    let p = spec.p;
    if let Some(idx) = post.grid.exact_match(x_star) {
        let z_row = latents.z.as_ref().map(|z| z.row(idx).transpose());
        let parts = assemble_parts(
            &latents.u[idx],
            z_row.as_ref(),
            &latents.l,
            spec.variant,
            spec.use_diag,
        )?;
        return Ok(MomentDraw {
            mean: latents.mu.row(idx).transpose(),
            cov: parts.sigma,
            precision: parts.precision,
        });
    }
    let cm = cond_mu.ok_or_else(|| Error::Internal("missing mu conditioner".into()))?;
    let cs = cond_sig.ok_or_else(|| Error::Internal("missing sigma conditioner".into()))?;
    let cols = LatentColumns { latents };
    let sd_mu = cm.var.sqrt();
    let sd_sig = cs.var.sqrt();
    let draw_scalar = |mean: f64, sd: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        if deterministic {
            mean
        } else {
            mean + sd * rng.sample::<f64, _>(StandardNormal)
        }
    };

    let mu_star = DVector::from_fn(n, |ni, _| {
        draw_scalar(cm.mean(&cols.mu_col(ni)), sd_mu, rng)
    });
    let u_star = DMatrix::from_fn(n, p, |ni, pi| {
        draw_scalar(cs.mean(&cols.u_col(ni, pi)), sd_sig, rng)
    });
    let z_star = post.spec.has_z().then(|| {
        DVector::from_fn(n, |ni, _| draw_scalar(cs.mean(&cols.z_col(ni)), sd_sig, rng))
    });
    assemble_draw(post, mu_star, u_star, z_star, lifts)
}

/// S posterior draws of the moments at x*. Deterministic given `seed`.
pub fn predict_moments(
    post: &Posterior,
    x_star: &[f64],
    s: usize,
    seed: u64,
) -> Result<MomentSamples> {
    if s == 0 {
        return Err(Error::invalid_parameter("S must be >= 1"));
    }
    let grams = post.grams()?;
    let on_grid = post.grid.exact_match(x_star).is_some();
    let (cond_mu, cond_sig) = if on_grid {
        (None, None)
    } else {
        (
            Some(CurveConditioner::new(
                &post.spec.k_mu,
                &grams.mu,
                post.grid.points(),
                x_star,
            )?),
            Some(CurveConditioner::new(
                &post.spec.k_sigma,
                &grams.sigma,
                post.grid.points(),
                x_star,
            )?),
        )
    };
    let mut draws = Vec::with_capacity(s);
    let mut lifts = 0usize;
    for si in 0..s {
        let mut rng = rng_for_task(seed, si as u64);
        let latents = post.state.sample_latents(&post.spec, &mut rng);
        draws.push(draw_at(
            post,
            &latents,
            x_star,
            cond_mu.as_ref(),
            cond_sig.as_ref(),
            &mut rng,
            false,
            &mut lifts,
        )?);
    }
    Ok(MomentSamples {
        x_star: x_star.to_vec(),
        seed,
        draws,
        lift_count: lifts,
    })
}

/// Mean-field plug-in moments at x*: condition on the variational means and
/// take conditional means everywhere. A point estimate, not a posterior
/// sample.
pub fn predict_moments_plugin(post: &Posterior, x_star: &[f64]) -> Result<MomentDraw> {
    let grams = post.grams()?;
    let latents = post.state.plugin_latents(&post.spec);
    let on_grid = post.grid.exact_match(x_star).is_some();
    let (cond_mu, cond_sig) = if on_grid {
        (None, None)
    } else {
        (
            Some(CurveConditioner::new(
                &post.spec.k_mu,
                &grams.mu,
                post.grid.points(),
                x_star,
            )?),
            Some(CurveConditioner::new(
                &post.spec.k_sigma,
                &grams.sigma,
                post.grid.points(),
                x_star,
            )?),
        )
    };
    let mut rng = rng_for_task(0, 0); // unused in deterministic mode
    let mut lifts = 0usize;
    draw_at(
        post,
        &latents,
        x_star,
        cond_mu.as_ref(),
        cond_sig.as_ref(),
        &mut rng,
        true,
        &mut lifts,
    )
}

fn moment_draws_for_test_set(
    post: &Posterior,
    test_grid: &ConditionGrid,
    rng: &mut rand_chacha::ChaCha8Rng,
    grams: &GramPair,
    conditioners: &[Option<(CurveConditioner, CurveConditioner)>],
    lifts: &mut usize,
) -> Result<Vec<MomentDraw>> {
    let _ = grams;
    let latents = post.state.sample_latents(&post.spec, rng);
    let mut out = Vec::with_capacity(test_grid.len());
    for (ci, x) in test_grid.points().iter().enumerate() {
        let (cm, cs) = match &conditioners[ci] {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        out.push(draw_at(post, &latents, x, cm, cs, rng, false, lifts)?);
    }
    Ok(out)
}

fn build_conditioners(
    post: &Posterior,
    grams: &GramPair,
    test_grid: &ConditionGrid,
) -> Result<Vec<Option<(CurveConditioner, CurveConditioner)>>> {
    test_grid
        .points()
        .iter()
        .map(|x| {
            if post.grid.exact_match(x).is_some() {
                Ok(None)
            } else {
                Ok(Some((
                    CurveConditioner::new(&post.spec.k_mu, &grams.mu, post.grid.points(), x)?,
                    CurveConditioner::new(
                        &post.spec.k_sigma,
                        &grams.sigma,
                        post.grid.points(),
                        x,
                    )?,
                )))
            }
        })
        .collect()
}

/// Held-out log-likelihood of Normal-observation test trials. Conditions may
/// sit on the training grid or anywhere interpolable.
///
/// `single_sample` draws one latent sample and sums log-densities (the
/// handicapped comparison protocol); `mc` takes log-mean-exp over per-sample
/// totals, so `mc` with S = 1 equals `single_sample` at the same seed.
pub fn heldout_loglik(
    post: &Posterior,
    test_grid: &ConditionGrid,
    test_trials: &[DMatrix<f64>],
    mode: HeldoutMode,
) -> Result<f64> {
    if post.spec.observation != Observation::Normal {
        return Err(Error::invalid_input(
            "heldout_loglik is for the Normal observation model; use marginal_loglik_poisson",
        ));
    }
    if test_trials.len() != test_grid.len() {
        return Err(Error::dim("one trial block per test condition required"));
    }
    let (s, seed) = match mode {
        HeldoutMode::SingleSample { seed } => (1, seed),
        HeldoutMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::invalid_parameter("S must be >= 1"));
            }
            (samples, seed)
        }
    };
    let grams = post.grams()?;
    let conditioners = build_conditioners(post, &grams, test_grid)?;
    let mut lifts = 0usize;
    let mut totals = Vec::with_capacity(s);
    for si in 0..s {
        let mut rng = rng_for_task(seed, si as u64);
        let draws = moment_draws_for_test_set(
            post,
            test_grid,
            &mut rng,
            &grams,
            &conditioners,
            &mut lifts,
        )?;
        let mut total = 0.0;
        for (ci, draw) in draws.iter().enumerate() {
            total += match &draw.precision {
                Some(prec) => loglik_normal_precision(&test_trials[ci], &draw.mean, prec)?,
                None => loglik_normal(&test_trials[ci], &draw.mean, &draw.cov)?,
            };
        }
        totals.push(total);
    }
    Ok(log_mean_exp(&totals))
}

/// Joint draws of moments and their derivatives along `axis` at x*.
pub fn posterior_gradients(
    post: &Posterior,
    x_star: &[f64],
    axis: usize,
    s: usize,
    seed: u64,
) -> Result<GradientSamples> {
    if s == 0 {
        return Err(Error::invalid_parameter("S must be >= 1"));
    }
    if axis >= post.grid.dim() {
        return Err(Error::invalid_input(format!(
            "axis {axis} out of range for {}-dimensional grid",
            post.grid.dim()
        )));
    }
    let spec = &post.spec;
    let grams = post.grams()?;
    let jc_mu = JointConditioner::new(&spec.k_mu, &grams.mu, post.grid.points(), x_star, axis)?;
    let jc_sig =
        JointConditioner::new(&spec.k_sigma, &grams.sigma, post.grid.points(), x_star, axis)?;
    let f_mu = jc_mu.factor2();
    let f_sig = jc_sig.factor2();
    let n = spec.n;
    let p = spec.p;

    let mut draws = Vec::with_capacity(s);
    let mut lifts = 0usize;
    for si in 0..s {
        let mut rng = rng_for_task(seed, si as u64);
        let latents = post.state.sample_latents(spec, &mut rng);
        let cols = LatentColumns { latents: &latents };
        let draw_pair = |jc: &JointConditioner,
                             f2: &[[f64; 2]; 2],
                             v: &DVector<f64>,
                             rng: &mut rand_chacha::ChaCha8Rng| {
            let (m, md) = jc.conditional_mean(v);
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            (m + f2[0][0] * e1, md + f2[1][0] * e1 + f2[1][1] * e2)
        };

        let mut mu_star = DVector::zeros(n);
        let mut mu_grad = DVector::zeros(n);
        for ni in 0..n {
            let (f, fp) = draw_pair(&jc_mu, &f_mu, &cols.mu_col(ni), &mut rng);
            mu_star[ni] = f;
            mu_grad[ni] = fp;
        }
        let mut u_star = DMatrix::zeros(n, p);
        let mut u_grad = DMatrix::zeros(n, p);
        for ni in 0..n {
            for pi in 0..p {
                let (f, fp) = draw_pair(&jc_sig, &f_sig, &cols.u_col(ni, pi), &mut rng);
                u_star[(ni, pi)] = f;
                u_grad[(ni, pi)] = fp;
            }
        }
        let (z_star, z_grad) = if spec.has_z() {
            let mut zs = DVector::zeros(n);
            let mut zg = DVector::zeros(n);
            for ni in 0..n {
                let (f, fp) = draw_pair(&jc_sig, &f_sig, &cols.z_col(ni), &mut rng);
                zs[ni] = f;
                zg[ni] = fp;
            }
            (Some(zs), Some(zg))
        } else {
            (None, None)
        };

        let moment =
            assemble_draw(post, mu_star, u_star.clone(), z_star.clone(), &mut lifts)?;

        // Chain rule for the covariance derivative:
        // A' = U' U' + U U'' + diag(logistic(z) z'), and the scale sandwich.
        let mut a_grad = &u_grad * u_star.transpose() + &u_star * u_grad.transpose();
        if let (Some(zs), Some(zg)) = (&z_star, &z_grad) {
            for i in 0..n {
                a_grad[(i, i)] += logistic(zs[i]) * zg[i];
            }
        }
        let l = post.state.scale_factor();
        let core_grad = match spec.variant {
            CovarianceVariant::Vanilla | CovarianceVariant::Lrd => a_grad,
            CovarianceVariant::ScaledLrd | CovarianceVariant::InverseScaledLrd => {
                let m = &l * a_grad * l.transpose();
                0.5 * (&m + m.transpose())
            }
        };
        let cov_grad = if spec.variant == CovarianceVariant::InverseScaledLrd {
            // d(B^-1) = -B^-1 dB B^-1
            let m = -(&moment.cov * core_grad * &moment.cov);
            0.5 * (&m + m.transpose())
        } else {
            core_grad
        };

        draws.push(GradientDraw {
            mean: moment.mean,
            mean_grad: mu_grad,
            cov: moment.cov,
            cov_grad,
            precision: moment.precision,
        });
    }
    Ok(GradientSamples {
        x_star: x_star.to_vec(),
        axis,
        seed,
        draws,
        lift_count: lifts,
    })
}

/// Draw from N(mean, cov) tolerating positive semidefinite covariance
/// (eigenvalue clamp fallback when the Cholesky fails).
fn sample_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> DVector<f64> {
    let n = mean.len();
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    if let Some(chol) = Cholesky::new(cov.clone()) {
        mean + chol.l() * eps
    } else {
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        let mut f = eig.eigenvectors.clone();
        for (j, ev) in eig.eigenvalues.iter().enumerate() {
            let s = ev.max(0.0).sqrt();
            for i in 0..n {
                f[(i, j)] *= s;
            }
        }
        mean + f * eps
    }
}

/// Monte-Carlo summary statistics in spike-count space: draw moments from
/// the posterior, gains from their Gaussian, counts from the Poisson
/// observation, and average the statistic.
pub fn poisson_summary_stats(
    post: &Posterior,
    x_c: &[f64],
    statistic: PoissonStatistic,
    s: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if post.spec.observation != Observation::Poisson {
        return Err(Error::invalid_input(
            "poisson_summary_stats requires the Poisson observation model",
        ));
    }
    if s == 0 {
        return Err(Error::invalid_parameter("S must be >= 1"));
    }
    let n = post.spec.n;
    let r = post.state.baseline_rates();
    let grams = post.grams()?;
    let on_grid = post.grid.exact_match(x_c).is_some();
    let (cond_mu, cond_sig) = if on_grid {
        (None, None)
    } else {
        (
            Some(CurveConditioner::new(
                &post.spec.k_mu,
                &grams.mu,
                post.grid.points(),
                x_c,
            )?),
            Some(CurveConditioner::new(
                &post.spec.k_sigma,
                &grams.sigma,
                post.grid.points(),
                x_c,
            )?),
        )
    };
    let mut lifts = 0usize;
    let mut counts: Vec<DVector<f64>> = Vec::with_capacity(s);
    for si in 0..s {
        let mut rng = rng_for_task(seed, si as u64);
        let latents = post.state.sample_latents(&post.spec, &mut rng);
        let draw = draw_at(
            post,
            &latents,
            x_c,
            cond_mu.as_ref(),
            cond_sig.as_ref(),
            &mut rng,
            false,
            &mut lifts,
        )?;
        let g = sample_gaussian(&draw.mean, &draw.cov, &mut rng);
        let y = DVector::from_fn(n, |i, _| {
            let rate = softplus(r[i] + g[i]);
            if rate <= 0.0 {
                0.0
            } else {
                rng.sample(rand_distr::Poisson::new(rate).expect("positive rate"))
            }
        });
        counts.push(y);
    }
    match statistic {
        PoissonStatistic::Mean => {
            let mut m = DVector::<f64>::zeros(n);
            for y in &counts {
                m += y;
            }
            m /= s as f64;
            Ok(DMatrix::from_column_slice(n, 1, m.as_slice()))
        }
        PoissonStatistic::Covariance => {
            let mut mean = DVector::<f64>::zeros(n);
            for y in &counts {
                mean += y;
            }
            mean /= s as f64;
            let mut cov = DMatrix::<f64>::zeros(n, n);
            for y in &counts {
                let d = y - &mean;
                cov.syger(1.0, &d, &d, 1.0);
            }
            cov /= s as f64;
            for i in 0..n {
                for j in 0..i {
                    cov[(j, i)] = cov[(i, j)];
                }
            }
            Ok(cov)
        }
    }
}

/// Marginalized held-out log-likelihood for the Poisson model: gains are
/// integrated out by Monte Carlo (log-mean-exp over per-sample totals).
pub fn marginal_loglik_poisson(
    post: &Posterior,
    test_grid: &ConditionGrid,
    test_trials: &[DMatrix<f64>],
    s: usize,
    seed: u64,
) -> Result<f64> {
    if post.spec.observation != Observation::Poisson {
        return Err(Error::invalid_input(
            "marginal_loglik_poisson requires the Poisson observation model",
        ));
    }
    if s == 0 {
        return Err(Error::invalid_parameter("S must be >= 1"));
    }
    if test_trials.len() != test_grid.len() {
        return Err(Error::dim("one trial block per test condition required"));
    }
    let r = post.state.baseline_rates();
    let grams = post.grams()?;
    let conditioners = build_conditioners(post, &grams, test_grid)?;
    let mut lifts = 0usize;
    let mut totals = Vec::with_capacity(s);
    for si in 0..s {
        let mut rng = rng_for_task(seed, si as u64);
        let draws = moment_draws_for_test_set(
            post,
            test_grid,
            &mut rng,
            &grams,
            &conditioners,
            &mut lifts,
        )?;
        let mut total = 0.0;
        for (ci, draw) in draws.iter().enumerate() {
            let y = &test_trials[ci];
            for ki in 0..y.nrows() {
                let g = sample_gaussian(&draw.mean, &draw.cov, &mut rng);
                let yk = y.row(ki).transpose();
                total += loglik_poisson_given_gain(&yk, &g, &r)?;
            }
        }
        totals.push(total);
    }
    Ok(log_mean_exp(&totals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{fit, FitConfig, Layout, VariationalFamily, VariationalState};
    use crate::kernels::AxisKernel;
    use crate::model::{sample_prior, ModelSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn se(gamma: f64, beta: f64, lambda: f64) -> ProductKernel {
        ProductKernel::new(vec![
            AxisKernel::squared_exponential(gamma, beta, lambda).unwrap()
        ])
        .unwrap()
    }

    fn periodic(gamma: f64, beta: f64, lambda: f64) -> ProductKernel {
        ProductKernel::new(vec![
            AxisKernel::periodic(gamma, beta, lambda, 2.0 * PI).unwrap()
        ])
        .unwrap()
    }

    fn op_norm(m: &DMatrix<f64>) -> f64 {
        nalgebra::SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, &e| acc.max(e.abs()))
    }

    /// Dense joint-Gaussian conditioning over [train; x*]: an independent
    /// route through the full covariance matrix and a generic inverse.
    fn dense_conditioning_oracle(
        kernel: &ProductKernel,
        x_train: &[Vec<f64>],
        values: &[f64],
        x_star: &[f64],
    ) -> (f64, f64) {
        let m = x_train.len();
        let mut joint = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut all: Vec<Vec<f64>> = x_train.to_vec();
        all.push(x_star.to_vec());
        for i in 0..=m {
            for j in 0..=m {
                joint[(i, j)] = kernel.eval(&all[i], &all[j]).unwrap();
            }
        }
        let k11 = joint.view((0, 0), (m, m)).into_owned();
        let k12 = joint.view((0, m), (m, 1)).into_owned();
        let k22 = joint[(m, m)];
        let inv = k11.try_inverse().unwrap();
        let v = DVector::from_column_slice(values);
        let mean = (k12.transpose() * &inv * v)[(0, 0)];
        let var = k22 - (k12.transpose() * &inv * k12)[(0, 0)];
        (mean, var)
    }

    #[test]
    fn conditioning_at_training_point_interpolates() {
        let k = periodic(0.0, 1.0, 1.0);
        let x_train = vec![vec![0.0], vec![1.5], vec![3.0]];
        let values = [0.3, -1.1, 0.8];
        let (mean, var) = condition_gp(&k, &x_train, &values, &[1.5]).unwrap();
        assert_relative_eq!(mean, -1.1, epsilon = 1e-9);
        assert!(var <= 1e-10, "variance {var}");
    }

    #[test]
    fn conditioning_far_away_reverts_to_prior() {
        let k = se(0.25, 1.0, 1.0);
        let x_train = vec![vec![0.0], vec![0.5]];
        let values = [2.0, -3.0];
        let (mean, var) = condition_gp(&k, &x_train, &values, &[1000.0]).unwrap();
        assert!(mean.abs() < 1e-6);
        assert_relative_eq!(var, 1.25, epsilon = 1e-6);
    }

    #[test]
    fn conditioning_matches_dense_oracle() {
        let mut rng = rng_for_task(2, 0);
        for trial in 0..200 {
            let kernel = if trial % 2 == 0 {
                se(0.05, 1.0, 1.0 + (trial % 5) as f64 * 0.3)
            } else {
                periodic(0.05, 0.8, 0.5 + (trial % 7) as f64 * 0.2)
            };
            let m = 1 + (trial % 5);
            let mut pts: Vec<Vec<f64>> = Vec::new();
            while pts.len() < m {
                let c = vec![rng.random_range(-3.0..3.0)];
                if pts.iter().all(|p| p[0] != c[0]) {
                    pts.push(c);
                }
            }
            let values: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x_star = vec![rng.random_range(-3.0..3.0)];
            let (mean, var) = condition_gp(&kernel, &pts, &values, &x_star).unwrap();
            let (mean_o, var_o) = dense_conditioning_oracle(&kernel, &pts, &values, &x_star);
            assert_relative_eq!(mean, mean_o, epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(var, var_o.max(0.0), epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    fn quick_posterior(seed: u64) -> (ModelSpec, Posterior) {
        let spec = ModelSpec {
            n: 3,
            p: 1,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: true,
            observation: Observation::Normal,
        };
        let grid = ConditionGrid::equispaced_angles(6, 2.0 * PI).unwrap();
        let (_, field) = sample_prior(&spec, grid.points(), None, seed).unwrap();
        let mut rng = rng_for_task(seed, 17);
        let trials: Vec<DMatrix<f64>> = (0..6)
            .map(|ci| {
                let lf = Cholesky::new(field.covariances[ci].clone()).unwrap().l();
                let mut y = DMatrix::<f64>::zeros(5, 3);
                for ki in 0..5 {
                    let eps = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let d = &field.means[ci] + &lf * eps;
                    for ni in 0..3 {
                        y[(ki, ni)] = d[ni];
                    }
                }
                y
            })
            .collect();
        let mut cfg = FitConfig::normal_defaults(seed);
        cfg.iterations = 150;
        cfg.step = 0.01;
        let post = fit(&spec, &grid, &trials, &cfg).unwrap();
        (spec, post)
    }

    #[test]
    fn delta_family_reproduces_fitted_moments_on_grid() {
        let spec = ModelSpec {
            n: 2,
            p: 1,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: true,
            observation: Observation::Normal,
        };
        let grid = ConditionGrid::equispaced_angles(4, 2.0 * PI).unwrap();
        let trials: Vec<DMatrix<f64>> = (0..4)
            .map(|ci| DMatrix::from_fn(3, 2, |ki, ni| (ci + ki + ni) as f64 * 0.3))
            .collect();
        let q = VariationalState::init(&spec, &grid, &trials, VariationalFamily::Delta, 5)
            .unwrap();
        let post = Posterior {
            spec: spec.clone(),
            grid: grid.clone(),
            state: q,
            elbo_trace: vec![],
        };
        let x = grid.points()[2].clone();
        let samples = predict_moments(&post, &x, 3, 99).unwrap();
        let latents = post.state.plugin_latents(&spec);
        let z_row = latents.z.as_ref().map(|z| z.row(2).transpose());
        let expect = assemble_parts(
            &latents.u[2],
            z_row.as_ref(),
            &latents.l,
            spec.variant,
            spec.use_diag,
        )
        .unwrap();
        for d in &samples.draws {
            assert_eq!(d.cov, expect.sigma);
            assert_eq!(d.mean, latents.mu.row(2).transpose());
        }
    }

    #[test]
    fn predict_is_reproducible_bitwise() {
        let (_, post) = quick_posterior(3);
        let a = predict_moments(&post, &[0.7], 20, 123).unwrap();
        let b = predict_moments(&post, &[0.7], 20, 123).unwrap();
        for (x, y) in a.draws.iter().zip(b.draws.iter()) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.cov, y.cov);
        }
    }

    #[test]
    fn flat_bandwidth_interpolation_matches_fitted_covariances() {
        // When the sigma kernel is effectively constant, the interpolated
        // covariance at a midpoint agrees with the fitted ones.
        let spec = ModelSpec {
            n: 2,
            p: 1,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1e6),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: false,
            observation: Observation::Normal,
        };
        let grid = ConditionGrid::equispaced_angles(8, 2.0 * PI).unwrap();
        let (_, field) = sample_prior(&spec, grid.points(), None, 4).unwrap();
        let mut rng = rng_for_task(4, 17);
        let trials: Vec<DMatrix<f64>> = (0..8)
            .map(|ci| {
                let lf = Cholesky::new(field.covariances[ci].clone()).unwrap().l();
                let mut y = DMatrix::<f64>::zeros(12, 2);
                for ki in 0..12 {
                    let eps = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let d = &field.means[ci] + &lf * eps;
                    y[(ki, 0)] = d[0];
                    y[(ki, 1)] = d[1];
                }
                y
            })
            .collect();
        let mut cfg = FitConfig::normal_defaults(4);
        cfg.iterations = 400;
        cfg.step = 0.01;
        let post = fit(&spec, &grid, &trials, &cfg).unwrap();
        let fitted = predict_moments_plugin(&post, &grid.points()[0].clone()).unwrap();
        let midpoint = vec![(grid.points()[0][0] + grid.points()[1][0]) / 2.0];
        let interp = predict_moments_plugin(&post, &midpoint).unwrap();
        let rel = op_norm(&(&interp.cov - &fitted.cov)) / op_norm(&fitted.cov);
        assert!(rel < 1e-2, "relative operator-norm gap {rel}");
    }

    #[test]
    fn mc_one_sample_equals_single_sample() {
        let (_, post) = quick_posterior(6);
        let test_grid = post.grid.subset(&[1, 3]).unwrap();
        let mut rng = rng_for_task(6, 18);
        let test_trials: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(2, 3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let a = heldout_loglik(
            &post,
            &test_grid,
            &test_trials,
            HeldoutMode::SingleSample { seed: 7 },
        )
        .unwrap();
        let b = heldout_loglik(
            &post,
            &test_grid,
            &test_trials,
            HeldoutMode::MonteCarlo {
                samples: 1,
                seed: 7,
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_is_seed_independent_for_delta() {
        let spec = ModelSpec {
            n: 2,
            p: 0,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::Lrd,
            use_diag: true,
            observation: Observation::Normal,
        };
        let grid = ConditionGrid::equispaced_angles(3, 2.0 * PI).unwrap();
        let trials: Vec<DMatrix<f64>> = (0..3)
            .map(|ci| DMatrix::from_fn(4, 2, |ki, ni| ((ci * 7 + ki * 3 + ni) % 5) as f64 * 0.4))
            .collect();
        let q = VariationalState::init(&spec, &grid, &trials, VariationalFamily::Delta, 1)
            .unwrap();
        let post = Posterior {
            spec,
            grid: grid.clone(),
            state: q,
            elbo_trace: vec![],
        };
        let a = heldout_loglik(&post, &grid, &trials, HeldoutMode::SingleSample { seed: 1 })
            .unwrap();
        let b = heldout_loglik(&post, &grid, &trials, HeldoutMode::SingleSample { seed: 99 })
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_matches_hand_rolled_log_mean_exp() {
        let (_, post) = quick_posterior(8);
        let test_grid = post.grid.subset(&[0, 2]).unwrap();
        let mut rng = rng_for_task(8, 18);
        let test_trials: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let s = 4;
        let mc = heldout_loglik(
            &post,
            &test_grid,
            &test_trials,
            HeldoutMode::MonteCarlo { samples: s, seed: 11 },
        )
        .unwrap();
        // hand-roll: per-sample totals via single draws at per-sample seeds
        // (same derivation rule: sample si uses stream si of the seed)
        let mut totals = Vec::new();
        for si in 0..s {
            // reproduce draw si by asking for a 1-sample MC at shifted stream:
            // the implementation derives sample streams as rng_for_task(seed, si),
            // so a single-sample call at the same stream matches draw si.
            let v = {
                let grams = post.grams().unwrap();
                let conds = build_conditioners(&post, &grams, &test_grid).unwrap();
                let mut lifts = 0;
                let mut rng = rng_for_task(11, si as u64);
                let draws = moment_draws_for_test_set(
                    &post, &test_grid, &mut rng, &grams, &conds, &mut lifts,
                )
                .unwrap();
                draws
                    .iter()
                    .enumerate()
                    .map(|(ci, d)| loglik_normal(&test_trials[ci], &d.mean, &d.cov).unwrap())
                    .sum::<f64>()
            };
            totals.push(v);
        }
        assert_relative_eq!(mc, log_mean_exp(&totals), epsilon = 1e-12);
    }

    #[test]
    fn gradient_draws_are_symmetric_and_flat_in_wide_bandwidth_limit() {
        let spec = ModelSpec {
            n: 2,
            p: 1,
            k_mu: periodic(0.0, 1.0, 1e6),
            k_sigma: periodic(0.0, 1.0, 1e6),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: true,
            observation: Observation::Normal,
        };
        let grid = ConditionGrid::equispaced_angles(5, 2.0 * PI).unwrap();
        let trials: Vec<DMatrix<f64>> = (0..5)
            .map(|ci| DMatrix::from_fn(3, 2, |ki, ni| ((ci + ki + ni) % 3) as f64 * 0.5))
            .collect();
        let q = VariationalState::init(&spec, &grid, &trials, VariationalFamily::Delta, 2)
            .unwrap();
        let post = Posterior {
            spec,
            grid,
            state: q,
            elbo_trace: vec![],
        };
        let gs = posterior_gradients(&post, &[0.9], 0, 50, 3).unwrap();
        for d in &gs.draws {
            assert!(op_norm(&(&d.cov_grad - &d.cov_grad.transpose())) < 1e-12);
            for v in d.mean_grad.iter() {
                assert!(v.abs() < 1e-3, "flat-limit mean gradient {v}");
            }
        }
    }

    #[test]
    fn joint_conditional_matches_dense_block_oracle() {
        // Scalar latent, 2 training points: conditional of (f, f') from the
        // implementation equals dense conditioning on the explicit 3x3 joint
        // covariance with derivative blocks.
        let kernel = se(0.0, 1.3, 0.9);
        let pts = vec![vec![0.2], vec![1.1]];
        let x_star = [0.6];
        let values = DVector::from_column_slice(&[0.7, -0.4]);
        let gram = kernel.gram(&pts).unwrap();
        let factor = gram.factorize().unwrap();
        let jc = JointConditioner::new(&kernel, &factor, &pts, &x_star, 0).unwrap();
        let (m_f, m_fp) = jc.conditional_mean(&values);

        // dense oracle over (f(x1), f(x2), f(x*), f'(x*))
        let mut joint = DMatrix::<f64>::zeros(4, 4);
        let all = [pts[0].clone(), pts[1].clone(), x_star.to_vec()];
        for i in 0..3 {
            for j in 0..3 {
                joint[(i, j)] = kernel.eval(&all[i], &all[j]).unwrap();
            }
        }
        for i in 0..3 {
            // Cov(f(x_i), f'(x*)) = d/dx* k(x_i, x*)
            let v = kernel.d_dx1(&x_star, &all[i], 0).unwrap();
            joint[(i, 3)] = v;
            joint[(3, i)] = v;
        }
        joint[(3, 3)] = kernel.d2_at(&x_star, 0).unwrap();
        let k11 = joint.view((0, 0), (2, 2)).into_owned();
        let k12 = joint.view((0, 2), (2, 2)).into_owned();
        let k22 = joint.view((2, 2), (2, 2)).into_owned();
        let inv = k11.try_inverse().unwrap();
        let mean_o = k12.transpose() * &inv * &values;
        let cov_o = k22 - k12.transpose() * inv * k12;

        assert_relative_eq!(m_f, mean_o[0], epsilon = 1e-8);
        assert_relative_eq!(m_fp, mean_o[1], epsilon = 1e-8);
        assert_relative_eq!(jc.cov[0][0], cov_o[(0, 0)], epsilon = 1e-8);
        assert_relative_eq!(jc.cov[0][1], cov_o[(0, 1)], epsilon = 1e-8);
        assert_relative_eq!(jc.cov[1][0], cov_o[(1, 0)], epsilon = 1e-8);
        assert_relative_eq!(jc.cov[1][1], cov_o[(1, 1)], epsilon = 1e-8);
    }

    fn degenerate_poisson_posterior(mu_val: f64) -> Posterior {
        // Sigma ~ 0 via a very negative diagonal field, mu fixed, r = -mu.
        let spec = ModelSpec {
            n: 1,
            p: 0,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::Lrd,
            use_diag: true,
            observation: Observation::Poisson,
        };
        let grid = ConditionGrid::equispaced_angles(1, 2.0 * PI).unwrap();
        let layout = Layout::new(&spec, 1, &[1]);
        let mut params = DVector::<f64>::zeros(layout.param_len(VariationalFamily::Delta));
        params[layout.mu_idx(0, 0)] = mu_val;
        params[layout.z_idx(0, 0)] = -60.0; // softplus(-60) ~ 0
        let ts = layout.theta_start(VariationalFamily::Delta);
        params[ts + layout.l_idx(0, 0)] = 0.0; // log L_00 = 0
        params[ts + layout.r_off()] = -mu_val;
        Posterior {
            spec,
            grid,
            state: VariationalState {
                family: VariationalFamily::Delta,
                layout,
                params,
            },
            elbo_trace: vec![],
        }
    }

    #[test]
    fn degenerate_poisson_summary_stats() {
        // r + mu = 0 so rate = softplus(0) = ln 2; Poisson mean and variance
        // both equal the rate.
        let post = degenerate_poisson_posterior(0.8);
        let s = 10_000;
        let x = post.grid.points()[0].clone();
        let mean = poisson_summary_stats(&post, &x, PoissonStatistic::Mean, s, 5).unwrap();
        let ln2 = std::f64::consts::LN_2;
        let se3 = 3.0 * (ln2 / s as f64).sqrt();
        assert!(
            (mean[(0, 0)] - ln2).abs() < se3,
            "mean {} vs {ln2}",
            mean[(0, 0)]
        );
        let cov =
            poisson_summary_stats(&post, &x, PoissonStatistic::Covariance, s, 6).unwrap();
        assert!((cov[(0, 0)] - ln2).abs() < 4.0 * se3, "var {}", cov[(0, 0)]);
        assert_eq!(cov[(0, 1.min(cov.ncols() - 1))], cov[(0, 0)].min(cov[(0, 0)]));
        // symmetry is trivial at N=1; exercise N>1 elsewhere
    }

    #[test]
    fn poisson_summary_covariance_is_symmetric() {
        let spec = ModelSpec {
            n: 3,
            p: 1,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: true,
            observation: Observation::Poisson,
        };
        let grid = ConditionGrid::equispaced_angles(2, 2.0 * PI).unwrap();
        let trials: Vec<DMatrix<f64>> = (0..2)
            .map(|ci| DMatrix::from_fn(4, 3, |ki, ni| ((ci + ki + ni) % 4) as f64))
            .collect();
        let q = VariationalState::init(&spec, &grid, &trials, VariationalFamily::Delta, 3)
            .unwrap();
        let post = Posterior {
            spec,
            grid,
            state: q,
            elbo_trace: vec![],
        };
        let x = post.grid.points()[1].clone();
        let cov = poisson_summary_stats(&post, &x, PoissonStatistic::Covariance, 300, 9).unwrap();
        assert_eq!(cov, cov.transpose());
    }

    #[test]
    fn marginal_poisson_collapses_when_sigma_vanishes() {
        let post = degenerate_poisson_posterior(0.5);
        let y = DMatrix::from_row_slice(1, 1, &[1.0]);
        let grid = post.grid.clone();
        let est = marginal_loglik_poisson(&post, &grid, &[y.clone()], 10_000, 3).unwrap();
        // closed form: Poisson log-pmf at rate softplus(r + mu) = ln 2
        let rate = std::f64::consts::LN_2;
        let exact = 1.0 * rate.ln() - rate; // y = 1
        assert!((est - exact).abs() < 1e-6, "{est} vs {exact}");

        // S = 1 reduces to a single-draw plug-in likelihood (still exact in
        // the degenerate case).
        let single = marginal_loglik_poisson(&post, &grid, &[y], 1, 3).unwrap();
        assert!((single - exact).abs() < 1e-9);
    }

    #[test]
    fn marginal_poisson_mc_variance_shrinks_with_s() {
        let spec = ModelSpec {
            n: 2,
            p: 1,
            k_mu: periodic(0.001, 1.0, 1.0),
            k_sigma: periodic(0.001, 1.0, 1.0),
            variant: crate::model::CovarianceVariant::ScaledLrd,
            use_diag: true,
            observation: Observation::Poisson,
        };
        let grid = ConditionGrid::equispaced_angles(3, 2.0 * PI).unwrap();
        let trials: Vec<DMatrix<f64>> = (0..3)
            .map(|ci| DMatrix::from_fn(5, 2, |ki, ni| ((ci * 3 + ki + ni) % 5) as f64))
            .collect();
        let q = VariationalState::init(&spec, &grid, &trials, VariationalFamily::Gaussian, 4)
            .unwrap();
        let post = Posterior {
            spec,
            grid: grid.clone(),
            state: q,
            elbo_trace: vec![],
        };
        let var_of = |s: usize| {
            let vals: Vec<f64> = (0..50)
                .map(|rep| {
                    marginal_loglik_poisson(&post, &grid, &trials, s, 1000 + rep).unwrap()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let v10 = var_of(10);
        let v1000 = var_of(1000);
        assert!(
            v1000 < v10,
            "estimator variance did not shrink: {v10} -> {v1000}"
        );
    }
}
