//! Synthetic benchmark data: moments from the generative prior over a
//! periodic 1-D condition space, trials from the observation model.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::grid::ConditionGrid;
use crate::kernels::{AxisKernel, ProductKernel};
use crate::model::{sample_prior, CovarianceVariant, ModelSpec, Observation};
use crate::util::{rng_for_task, softplus, softplus_inv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// L L' = U diag(s) U' with s log-spaced from 1 to 1e-5 and U a
    /// uniformly sampled orthogonal matrix (low-dimensional noise).
    Structured,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticParams {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_c")]
    pub c: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_p")]
    pub p_true: usize,
    #[serde(default = "d_lambda")]
    pub lambda_sigma: f64,
    #[serde(default = "d_lambda")]
    pub lambda_mu: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_scale_mode")]
    pub scale_mode: ScaleMode,
    #[serde(default = "d_observation")]
    pub observation: Observation,
    /// Scalar baseline rate parameter broadcast to every neuron
    /// (Poisson observation only).
    #[serde(default = "d_rate")]
    pub baseline_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_n() -> usize {
    100
}
fn d_c() -> usize {
    30
}
fn d_k() -> usize {
    10
}
fn d_p() -> usize {
    2
}
fn d_lambda() -> f64 {
    1.0
}
fn d_gamma() -> f64 {
    0.001
}
fn d_beta() -> f64 {
    1.0
}
fn d_scale_mode() -> ScaleMode {
    ScaleMode::Structured
}
fn d_observation() -> Observation {
    Observation::Normal
}
fn d_rate() -> f64 {
    3.0
}

impl Default for SyntheticParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SyntheticParams {
    /// The generative spec implied by the parameters: periodic kernels over
    /// equispaced angles, scaled low-rank covariance with the identity
    /// diagonal.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let period = 2.0 * std::f64::consts::PI;
        let k_mu = ProductKernel::new(vec![AxisKernel::periodic(
            self.gamma,
            self.beta,
            self.lambda_mu,
            period,
        )?])?;
        let k_sigma = ProductKernel::new(vec![AxisKernel::periodic(
            self.gamma,
            self.beta,
            self.lambda_sigma,
            period,
        )?])?;
        Ok(ModelSpec {
            n: self.n,
            p: self.p_true,
            k_mu,
            k_sigma,
            variant: CovarianceVariant::ScaledLrd,
            use_diag: false,
            observation: self.observation,
        })
    }
}

/// Uniformly (Haar) sampled orthogonal matrix: QR of a standard normal
/// matrix with the R diagonal's signs absorbed into Q.
pub fn haar_orthogonal(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Structured scale factor: lower-triangular L with
/// L L' = U diag(s) U', s log-spaced from 1 to 1e-5.
fn structured_scale(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<DMatrix<f64>> {
    let u = haar_orthogonal(n, rng);
    let s = DVector::from_fn(n, |i, _| {
        if n == 1 {
            1.0
        } else {
            10f64.powf(-5.0 * i as f64 / (n - 1) as f64)
        }
    });
    let m = &u * DMatrix::from_diagonal(&s) * u.transpose();
    let m = 0.5 * (&m + m.transpose());
    Cholesky::new(m)
        .map(|c| c.l())
        .ok_or_else(|| Error::singular("structured scale matrix"))
}

/// Draw a full synthetic dataset with retained ground truth.
/// Deterministic given `params.seed`.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Dataset> {
    if params.n == 0 || params.c == 0 || params.k == 0 {
        return Err(Error::invalid_parameter("n, c, k must all be >= 1"));
    }
    let spec = params.model_spec()?;
    let grid = ConditionGrid::equispaced_angles(params.c, 2.0 * std::f64::consts::PI)?;

    let mut scale_rng = rng_for_task(params.seed, 1);
    let scale = match params.scale_mode {
        ScaleMode::Identity => DMatrix::identity(params.n, params.n),
        ScaleMode::Structured => structured_scale(params.n, &mut scale_rng)?,
    };

    let (_, truth) = sample_prior(&spec, grid.points(), Some(&scale), params.seed)?;

    let mut trial_rng = rng_for_task(params.seed, 2);
    let mut trials = Vec::with_capacity(params.c);
    for ci in 0..params.c {
        let factor = Cholesky::new(truth.covariances[ci].clone())
            .ok_or_else(|| Error::singular(format!("true covariance at condition {ci}")))?
            .l();
        let mut y = DMatrix::<f64>::zeros(params.k, params.n);
        for ki in 0..params.k {
            let eps =
                DVector::from_fn(params.n, |_, _| trial_rng.sample::<f64, _>(StandardNormal));
            let draw = &truth.means[ci] + &factor * eps;
            match params.observation {
                Observation::Normal => {
                    for ni in 0..params.n {
                        y[(ki, ni)] = draw[ni];
                    }
                }
                Observation::Poisson => {
                    let r0 = softplus_inv(params.baseline_rate.max(1e-6));
                    for ni in 0..params.n {
                        let rate = softplus(r0 + draw[ni]);
                        y[(ki, ni)] = if rate > 0.0 {
                            trial_rng.sample(rand_distr::Poisson::new(rate).expect("rate > 0"))
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        trials.push(y);
    }

    let ds = Dataset {
        grid,
        trials,
        truth: Some(truth),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_matches_protocol() {
        let params = SyntheticParams {
            n: 20, // scaled down for test speed; defaults are {100, 30, 10}
            ..Default::default()
        };
        assert_eq!(
            (params.c, params.k, params.lambda_sigma, params.p_true),
            (30, 10, 1.0, 2)
        );
        let ds = generate_synthetic(&params).unwrap();
        assert_eq!(ds.trials.len(), 30);
        assert_eq!(ds.trials[0].nrows(), 10);
        assert_eq!(ds.trials[0].ncols(), 20);
        assert!(ds.truth.is_some());
    }

    #[test]
    fn structured_scale_spans_five_decades() {
        let n = 40;
        let mut rng = rng_for_task(3, 0);
        let l = structured_scale(n, &mut rng).unwrap();
        let m = &l * l.transpose();
        let eigs = nalgebra::SymmetricEigen::new(m).eigenvalues;
        let max = eigs.max();
        let min = eigs.min();
        let ratio = max / min;
        assert!((ratio.log10() - 5.0).abs() < 0.2, "ratio 10^{}", ratio.log10());
    }

    #[test]
    fn haar_matrix_is_orthogonal() {
        let mut rng = rng_for_task(4, 0);
        let q = haar_orthogonal(12, &mut rng);
        let err = (&q * q.transpose() - DMatrix::<f64>::identity(12, 12))
            .abs()
            .max();
        assert!(err < 1e-10);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SyntheticParams {
            n: 6,
            c: 8,
            k: 4,
            seed: 9,
            ..Default::default()
        };
        let a = generate_synthetic(&params).unwrap();
        let b = generate_synthetic(&params).unwrap();
        for (x, y) in a.trials.iter().zip(b.trials.iter()) {
            assert_eq!(x, y);
        }
        let c = generate_synthetic(&SyntheticParams { seed: 10, ..params }).unwrap();
        assert_ne!(a.trials[0], c.trials[0]);
    }

    #[test]
    fn truth_is_spd_and_low_dimensional_in_structured_mode() {
        let params = SyntheticParams {
            n: 50,
            c: 6,
            k: 2,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(&params).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for cov in &truth.covariances {
            let min_eig = nalgebra::SymmetricEigen::new(cov.clone())
                .eigenvalues
                .min();
            assert!(min_eig > 0.0);
            let pr = crate::analysis::participation_ratio(cov).unwrap();
            assert!(pr <= 0.5 * params.n as f64, "participation ratio {pr}");
        }
    }

    #[test]
    fn poisson_generation_yields_counts() {
        let params = SyntheticParams {
            n: 5,
            c: 4,
            k: 6,
            observation: Observation::Poisson,
            scale_mode: ScaleMode::Identity,
            seed: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&params).unwrap();
        for y in &ds.trials {
            for v in y.iter() {
                assert!(*v >= 0.0 && v.fract() == 0.0);
            }
        }
    }
}
