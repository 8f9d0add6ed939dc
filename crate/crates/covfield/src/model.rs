//! Generative model: GP priors over means, Wishart-process priors over
//! covariances, covariance assembly for all variants, prior sampling, and
//! observation likelihoods.
//!
//! The covariance at a condition is built from an N x P latent factor matrix
//! `U`, an optional positive diagonal field, and a fixed lower-triangular
//! scale factor `L`:
//!
//! ```text
//! vanilla              U U'
//! lrd                  U U' + diag
//! scaled-lrd           L (U U' + diag) L'
//! inverse-scaled-lrd   (L (U U' + diag) L')^-1
//! ```
//!
//! where `diag` is `softplus(z)` per neuron when the diagonal field is
//! learned, the identity when it is not, and absent for vanilla.
//! Every scalar latent curve (each mean coordinate, each entry of `U`, each
//! entry of `z`) is an independent zero-mean GP over conditions.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ProductKernel;
use crate::util::{ln_softplus, rng_for_task, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceVariant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "lrd")]
    Lrd,
    #[serde(rename = "scaled-lrd")]
    ScaledLrd,
    #[serde(rename = "inverse-scaled-lrd")]
    InverseScaledLrd,
}

impl CovarianceVariant {
    pub fn uses_scale(&self) -> bool {
        matches!(
            self,
            CovarianceVariant::ScaledLrd | CovarianceVariant::InverseScaledLrd
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Normal,
    Poisson,
}

/// Full generative specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of simultaneously observed coordinates (neurons).
    pub n: usize,
    /// Wishart component count (columns of `U`).
    pub p: usize,
    pub k_mu: ProductKernel,
    pub k_sigma: ProductKernel,
    pub variant: CovarianceVariant,
    /// Learn a condition-dependent diagonal field. When off, non-vanilla
    /// variants use the fixed identity diagonal.
    pub use_diag: bool,
    pub observation: Observation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid_parameter("n must be >= 1"));
        }
        if self.k_mu.dim() != self.k_sigma.dim() {
            return Err(Error::dim("k_mu and k_sigma must share the axis count"));
        }
        match self.variant {
            CovarianceVariant::Vanilla => {
                if self.p == 0 {
                    return Err(Error::invalid_parameter("vanilla variant requires P >= 1"));
                }
                if self.use_diag {
                    return Err(Error::invalid_parameter(
                        "vanilla variant has no diagonal field",
                    ));
                }
            }
            CovarianceVariant::Lrd | CovarianceVariant::ScaledLrd => {
                if self.p == 0 && !self.use_diag {
                    return Err(Error::invalid_parameter(
                        "P = 0 requires the learned diagonal field",
                    ));
                }
            }
            CovarianceVariant::InverseScaledLrd => {
                if !self.use_diag && self.p < self.n {
                    return Err(Error::invalid_parameter(
                        "inverse variant requires use_diag or P >= N",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the model carries a learned diagonal latent field.
    pub fn has_z(&self) -> bool {
        self.use_diag && self.variant != CovarianceVariant::Vanilla
    }
}

/// Per-condition latent values plus the global parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// C x N condition means.
    pub mu: DMatrix<f64>,
    /// Per condition, the N x P factor matrix.
    pub u: Vec<DMatrix<f64>>,
    /// C x N pre-softplus diagonal field (only when the field is learned).
    pub z: Option<DMatrix<f64>>,
    /// N x N lower-triangular scale factor with positive diagonal.
    pub l: DMatrix<f64>,
    /// Baseline rates (Poisson observation only).
    pub r: Option<DVector<f64>>,
    /// Per condition, the K_c x N gain matrix (Poisson observation only).
    pub gains: Option<Vec<DMatrix<f64>>>,
}

/// Per-condition mean and covariance (and, for the inverse variant, the
/// directly-parameterized precision).
#[derive(Debug, Clone)]
pub struct MomentField {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub precisions: Option<Vec<DMatrix<f64>>>,
}

impl MomentField {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Covariance (and precision, when it is the primal object) at one condition.
#[derive(Debug, Clone)]
pub struct CovarianceParts {
    pub sigma: DMatrix<f64>,
    /// Set for the inverse variant, where the precision is what the model
    /// parameterizes; downstream consumers can use it without inverting.
    pub precision: Option<DMatrix<f64>>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// The inner term `U U' + diag` shared by all variants.
fn inner_matrix(
    u_c: &DMatrix<f64>,
    z_c: Option<&DVector<f64>>,
    variant: CovarianceVariant,
    use_diag: bool,
) -> Result<DMatrix<f64>> {
    let n = u_c.nrows();
    let mut a = u_c * u_c.transpose();
    match (variant, use_diag) {
        (CovarianceVariant::Vanilla, _) => {
            if z_c.is_some() {
                return Err(Error::invalid_parameter(
                    "vanilla variant takes no diagonal field",
                ));
            }
        }
        (_, true) => {
            let z = z_c.ok_or_else(|| {
                Error::invalid_parameter("use_diag requires diagonal field values")
            })?;
            if z.len() != n {
                return Err(Error::dim("diagonal field length != N"));
            }
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
    symmetrize(&mut a);
    Ok(a)
}

/// Assemble the condition covariance from latent pieces.
///
/// For the inverse variant the result is computed by a Cholesky solve of the
/// directly-built precision; no inverse-then-invert round trip happens.
pub fn assemble_parts(
    u_c: &DMatrix<f64>,
    z_c: Option<&DVector<f64>>,
    l: &DMatrix<f64>,
    variant: CovarianceVariant,
    use_diag: bool,
) -> Result<CovarianceParts> {
    let n = u_c.nrows();
    if variant.uses_scale() && (l.nrows() != n || l.ncols() != n) {
        return Err(Error::dim("scale factor L must be N x N"));
    }
    let a = inner_matrix(u_c, z_c, variant, use_diag)?;
    match variant {
        CovarianceVariant::Vanilla | CovarianceVariant::Lrd => Ok(CovarianceParts {
            sigma: a,
            precision: None,
        }),
        CovarianceVariant::ScaledLrd => {
            let mut sigma = l * a * l.transpose();
            symmetrize(&mut sigma);
            Ok(CovarianceParts {
                sigma,
                precision: None,
            })
        }
        CovarianceVariant::InverseScaledLrd => {
            let mut prec = l * a * l.transpose();
            symmetrize(&mut prec);
            let chol = Cholesky::new(prec.clone())
                .ok_or_else(|| Error::singular("assembled precision matrix"))?;
            let mut sigma = chol.solve(&DMatrix::identity(n, n));
            symmetrize(&mut sigma);
            Ok(CovarianceParts {
                sigma,
                precision: Some(prec),
            })
        }
    }
}

pub fn assemble_covariance(
    u_c: &DMatrix<f64>,
    z_c: Option<&DVector<f64>>,
    l: &DMatrix<f64>,
    variant: CovarianceVariant,
    use_diag: bool,
) -> Result<DMatrix<f64>> {
    assemble_parts(u_c, z_c, l, variant, use_diag).map(|p| p.sigma)
}

/// Assemble the whole moment field from a latent state, naming the condition
/// index on factorization failure.
pub fn moment_field(spec: &ModelSpec, latents: &LatentState) -> Result<MomentField> {
    let c = latents.mu.nrows();
    let mut means = Vec::with_capacity(c);
    let mut covs = Vec::with_capacity(c);
    let mut precs = Vec::with_capacity(c);
    for ci in 0..c {
        let z_col = latents.z.as_ref().map(|z| z.row(ci).transpose());
        let parts = assemble_parts(
            &latents.u[ci],
            z_col.as_ref(),
            &latents.l,
            spec.variant,
            spec.use_diag,
        )
        .map_err(|e| match e {
            Error::Singular(msg) => Error::singular(format!("condition {ci}: {msg}")),
            other => other,
        })?;
        means.push(latents.mu.row(ci).transpose());
        covs.push(parts.sigma);
        if let Some(p) = parts.precision {
            precs.push(p);
        }
    }
    let precisions = if precs.len() == c { Some(precs) } else { None };
    Ok(MomentField {
        means,
        covariances: covs,
        precisions,
    })
}

/// Draw a latent state and its moment field from the prior.
///
/// Each scalar latent curve is drawn as `R eps` where `R` is the Cholesky
/// factor of the corresponding Gram matrix. Draw order is fixed (mean
/// coordinates by neuron, then `U` by neuron-major/component-minor order,
/// then the diagonal field by neuron), so identical seeds give bit-identical
/// states. The scale factor is not sampled; pass one via `scale` or the
/// identity is used.
pub fn sample_prior(
    spec: &ModelSpec,
    points: &[Vec<f64>],
    scale: Option<&DMatrix<f64>>,
    seed: u64,
) -> Result<(LatentState, MomentField)> {
    spec.validate()?;
    let c = points.len();
    if c == 0 {
        return Err(Error::invalid_input("empty condition set"));
    }
    let n = spec.n;
    let p = spec.p;
    let l = match scale {
        Some(m) => {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::dim("scale factor must be N x N"));
            }
            m.clone()
        }
        None => DMatrix::identity(n, n),
    };

    let gram_mu = spec.k_mu.gram(points)?.factorize()?;
    let gram_sigma = spec.k_sigma.gram(points)?.factorize()?;
    // l() zeroes the strict upper triangle; l_dirty() would not.
    let r_mu = gram_mu.cholesky().l();
    let r_sigma = gram_sigma.cholesky().l();

    let mut rng = rng_for_task(seed, 0);
    let draw_curve = |factor: &DMatrix<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        let eps = DVector::from_fn(c, |_, _| rng.sample::<f64, _>(StandardNormal));
        factor * eps
    };

    let mut mu = DMatrix::zeros(c, n);
    for ni in 0..n {
        let curve = draw_curve(&r_mu, &mut rng);
        mu.set_column(ni, &curve); // column ni = neuron ni across conditions
    }
    // mu is stored C x N; the loop above already laid it out that way.

    let mut u: Vec<DMatrix<f64>> = (0..c).map(|_| DMatrix::zeros(n, p)).collect();
    for ni in 0..n {
        for pi in 0..p {
            let curve = draw_curve(&r_sigma, &mut rng);
            for ci in 0..c {
                u[ci][(ni, pi)] = curve[ci];
            }
        }
    }

    let z = if spec.has_z() {
        let mut zm = DMatrix::zeros(c, n);
        for ni in 0..n {
            let curve = draw_curve(&r_sigma, &mut rng);
            zm.set_column(ni, &curve);
        }
        Some(zm)
    } else {
        None
    };

    let latents = LatentState {
        mu,
        u,
        z,
        l,
        r: None,
        gains: None,
    };
    let field = moment_field(spec, &latents)?;
    Ok((latents, field))
}

/// Sum of multivariate normal log-densities of the rows of `y` (K x N),
/// computed through a single Cholesky factorization of `sigma`.
pub fn loglik_normal(y: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let n = mu.len();
    if y.ncols() != n || sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::dim("loglik_normal shapes inconsistent"));
    }
    let k = y.nrows();
    let chol =
        Cholesky::new(sigma.clone()).ok_or_else(|| Error::singular("observation covariance"))?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lower = chol.l_dirty();
    let mut maha = 0.0;
    for ki in 0..k {
        let resid = y.row(ki).transpose() - mu;
        let w = lower
            .solve_lower_triangular(&resid)
            .ok_or_else(|| Error::singular("observation covariance"))?;
        maha += w.norm_squared();
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * (k as f64) * (n as f64 * ln2pi + log_det) - 0.5 * maha)
}

/// Same likelihood expressed with the precision matrix as the primal object
/// (inverse variant): `0.5 K logdet(P) - 0.5 sum (y-mu)' P (y-mu) - ...`.
pub fn loglik_normal_precision(
    y: &DMatrix<f64>,
    mu: &DVector<f64>,
    precision: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu.len();
    if y.ncols() != n || precision.nrows() != n || precision.ncols() != n {
        return Err(Error::dim("loglik_normal_precision shapes inconsistent"));
    }
    let k = y.nrows();
    let chol = Cholesky::new(precision.clone())
        .ok_or_else(|| Error::singular("observation precision"))?;
    let log_det_prec: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let mut maha = 0.0;
    for ki in 0..k {
        let resid = y.row(ki).transpose() - mu;
        let pr = precision * &resid;
        maha += resid.dot(&pr);
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * (k as f64) * (n as f64) * ln2pi + 0.5 * (k as f64) * log_det_prec - 0.5 * maha)
}

/// Poisson log-pmf of one trial's counts given gains: rates are
/// `softplus(r + g)` per neuron.
pub fn loglik_poisson_given_gain(
    y: &DVector<f64>,
    g: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<f64> {
    let n = y.len();
    if g.len() != n || r.len() != n {
        return Err(Error::dim("loglik_poisson shapes inconsistent"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let yi = y[i];
        if !(yi >= 0.0) || yi.fract() != 0.0 {
            return Err(Error::invalid_input(format!(
                "count {yi} is not a nonnegative integer"
            )));
        }
        let x = r[i] + g[i];
        let rate = softplus(x);
        total -= rate;
        if yi > 0.0 {
            total += yi * ln_softplus(x) - crate::util::ln_factorial(yi as u64);
        }
    }
    Ok(total)
}
