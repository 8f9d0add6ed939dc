//! Kernel specifications, Gram matrices, and kernel derivatives.
//!
//! Two axis kernel families are supported, squared-exponential for unbounded
//! coordinates and a periodic kernel for angular ones. Multi-dimensional
//! condition spaces use one kernel per coordinate and take the product.
//!
//! Both families carry a jitter atom `gamma * delta(x, x')` where the delta
//! tests *exact* coordinate equality, so duplicate coordinates share the
//! atom. The atom is treated as non-differentiable: all derivative blocks
//! are computed from the smooth `beta`-term only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis kernel family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    SquaredExponential,
    /// Periodic kernel with the given period.
    Periodic { period: f64 },
}

/// One-dimensional kernel `k(x,x') = gamma*delta + beta*exp(-d(x,x')/lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AxisKernelRaw", into = "AxisKernelRaw")]
pub struct AxisKernel {
    kind: KernelKind,
    gamma: f64,
    beta: f64,
    lambda: f64,
}

/// JSON form of an axis kernel: keys `kind`, `gamma`, `beta`, `lambda`,
/// and `period` (periodic only).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AxisKernelRaw {
    kind: String,
    gamma: f64,
    beta: f64,
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
}

impl TryFrom<AxisKernelRaw> for AxisKernel {
    type Error = Error;
    fn try_from(raw: AxisKernelRaw) -> Result<Self> {
        match raw.kind.as_str() {
            "squared-exponential" => {
                AxisKernel::squared_exponential(raw.gamma, raw.beta, raw.lambda)
            }
            "periodic" => {
                let period = raw.period.ok_or_else(|| {
                    Error::invalid_parameter("periodic kernel requires a period")
                })?;
                AxisKernel::periodic(raw.gamma, raw.beta, raw.lambda, period)
            }
            other => Err(Error::invalid_parameter(format!(
                "unknown kernel kind {other:?}"
            ))),
        }
    }
}

impl From<AxisKernel> for AxisKernelRaw {
    fn from(k: AxisKernel) -> Self {
        let (kind, period) = match k.kind {
            KernelKind::SquaredExponential => ("squared-exponential", None),
            KernelKind::Periodic { period } => ("periodic", Some(period)),
        };
        AxisKernelRaw {
            kind: kind.to_string(),
            gamma: k.gamma,
            beta: k.beta,
            lambda: k.lambda,
            period,
        }
    }
}

impl AxisKernel {
    pub fn squared_exponential(gamma: f64, beta: f64, lambda: f64) -> Result<Self> {
        Self::validate(gamma, beta, lambda)?;
        Ok(AxisKernel {
            kind: KernelKind::SquaredExponential,
            gamma,
            beta,
            lambda,
        })
    }

    pub fn periodic(gamma: f64, beta: f64, lambda: f64, period: f64) -> Result<Self> {
        Self::validate(gamma, beta, lambda)?;
        if !(period > 0.0) {
            return Err(Error::invalid_parameter("period must be > 0"));
        }
        Ok(AxisKernel {
            kind: KernelKind::Periodic { period },
            gamma,
            beta,
            lambda,
        })
    }

    fn validate(gamma: f64, beta: f64, lambda: f64) -> Result<()> {
        if !(beta > 0.0) {
            return Err(Error::invalid_parameter("beta must be > 0"));
        }
        if !(lambda > 0.0) {
            return Err(Error::invalid_parameter("lambda must be > 0"));
        }
        if !(gamma >= 0.0) {
            return Err(Error::invalid_parameter("gamma must be >= 0"));
        }
        Ok(())
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Returns a copy with a different bandwidth (used by CV sweeps).
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        match self.kind {
            KernelKind::SquaredExponential => {
                Self::squared_exponential(self.gamma, self.beta, lambda)
            }
            KernelKind::Periodic { period } => {
                Self::periodic(self.gamma, self.beta, lambda, period)
            }
        }
    }

    /// `k(x,x')` including the jitter atom (exact coordinate equality).
    pub fn eval(&self, x: f64, xp: f64) -> f64 {
        let atom = if x == xp { self.gamma } else { 0.0 };
        atom + self.eval_smooth(x, xp)
    }

    /// The differentiable `beta`-term alone.
    pub fn eval_smooth(&self, x: f64, xp: f64) -> f64 {
        let d = x - xp;
        match self.kind {
            KernelKind::SquaredExponential => self.beta * (-(d * d) / self.lambda).exp(),
            KernelKind::Periodic { period } => {
                let s = (std::f64::consts::PI * d / period).sin();
                self.beta * (-(s * s) / self.lambda).exp()
            }
        }
    }

    /// ∂k_smooth/∂x (derivative in the first argument).
    pub fn d_dx1(&self, x: f64, xp: f64) -> f64 {
        let d = x - xp;
        match self.kind {
            KernelKind::SquaredExponential => self.eval_smooth(x, xp) * (-2.0 * d / self.lambda),
            KernelKind::Periodic { period } => {
                let w = std::f64::consts::PI / period;
                // d/dx [-sin^2(w d)/lambda] = -(w/lambda) sin(2 w d)
                self.eval_smooth(x, xp) * (-(w / self.lambda) * (2.0 * w * d).sin())
            }
        }
    }

    /// ∂²k_smooth/∂x ∂x' (mixed derivative; positive at x = x').
    pub fn d2_dx1_dx2(&self, x: f64, xp: f64) -> f64 {
        let d = x - xp;
        let k = self.eval_smooth(x, xp);
        match self.kind {
            KernelKind::SquaredExponential => {
                let l = self.lambda;
                k * (2.0 / l - 4.0 * d * d / (l * l))
            }
            KernelKind::Periodic { period } => {
                let w = std::f64::consts::PI / period;
                let l = self.lambda;
                let v = 2.0 * w * d;
                k * (2.0 * w * w / l * v.cos() - (w * w / (l * l)) * v.sin() * v.sin())
            }
        }
    }

    /// `k(x,x) = gamma + beta`.
    pub fn diag_value(&self) -> f64 {
        self.gamma + self.beta
    }
}

/// Product kernel over the coordinates of the condition space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductKernel {
    axes: Vec<AxisKernel>,
}

impl ProductKernel {
    pub fn new(axes: Vec<AxisKernel>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid_parameter("product kernel needs >= 1 axis"));
        }
        Ok(ProductKernel { axes })
    }

    pub fn axes(&self) -> &[AxisKernel] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.axes.len() {
            return Err(Error::dim(format!(
                "kernel expects {} coordinates, got {}",
                self.axes.len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// `k(x,x') = prod_i k_i(x_i, x'_i)`.
    pub fn eval(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(xp)?;
        Ok(self
            .axes
            .iter()
            .zip(x.iter().zip(xp.iter()))
            .map(|(k, (&a, &b))| k.eval(a, b))
            .product())
    }

    /// Smooth part of the product (every axis atom dropped).
    pub fn eval_smooth(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(xp)?;
        Ok(self
            .axes
            .iter()
            .zip(x.iter().zip(xp.iter()))
            .map(|(k, (&a, &b))| k.eval_smooth(a, b))
            .product())
    }

    /// `k(x,x) = prod_i (gamma_i + beta_i)`, same for every x.
    pub fn diag_value(&self) -> f64 {
        self.axes.iter().map(|k| k.diag_value()).product()
    }

    /// Materialize the kernel over a point set.
    pub fn gram(&self, points: &[Vec<f64>]) -> Result<GramMatrix> {
        if points.is_empty() {
            return Err(Error::invalid_input("gram needs a non-empty point set"));
        }
        for p in points {
            self.check_dim(p)?;
        }
        let c = points.len();
        let mut m = DMatrix::<f64>::zeros(c, c);
        for i in 0..c {
            for j in 0..=i {
                // unwrap: dims already checked
                let v = self.eval(&points[i], &points[j]).unwrap();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(GramMatrix {
            matrix: m,
            points: points.to_vec(),
            diag_value: self.diag_value(),
        })
    }

    /// Cross-covariance vector `k(x*, X_i)` including atoms on exact matches.
    pub fn cross(&self, points: &[Vec<f64>], x_star: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x_star)?;
        let mut v = DVector::zeros(points.len());
        for (i, p) in points.iter().enumerate() {
            v[i] = self.eval(x_star, p)?;
        }
        Ok(v)
    }

    /// Derivative blocks along one axis for the joint (value, derivative) GP:
    /// the cross vector `∂k/∂x*(x*, X_i)` and the scalar `∂²k/∂x∂x'(x*, x*)`.
    /// Only the smooth part is differentiated; jitter atoms are excluded.
    pub fn gram_derivatives(
        &self,
        points: &[Vec<f64>],
        x_star: &[f64],
        axis: usize,
    ) -> Result<(DVector<f64>, f64)> {
        self.check_dim(x_star)?;
        if axis >= self.axes.len() {
            return Err(Error::invalid_input(format!(
                "axis {axis} out of range for {}-axis kernel",
                self.axes.len()
            )));
        }
        let mut cross = DVector::zeros(points.len());
        for (i, p) in points.iter().enumerate() {
            self.check_dim(p)?;
            cross[i] = self.d_dx1(x_star, p, axis)?;
        }
        let d2 = self.d2_at(x_star, axis)?;
        Ok((cross, d2))
    }

    /// ∂k_smooth/∂x_axis(x, x') with the remaining axes contributing their
    /// smooth factors.
    pub fn d_dx1(&self, x: &[f64], xp: &[f64], axis: usize) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(xp)?;
        let mut out = self.axes[axis].d_dx1(x[axis], xp[axis]);
        for (i, k) in self.axes.iter().enumerate() {
            if i != axis {
                out *= k.eval_smooth(x[i], xp[i]);
            }
        }
        Ok(out)
    }

    /// ∂²k_smooth/∂x_axis ∂x'_axis at (x*, x*).
    pub fn d2_at(&self, x_star: &[f64], axis: usize) -> Result<f64> {
        self.check_dim(x_star)?;
        let mut out = self.axes[axis].d2_dx1_dx2(x_star[axis], x_star[axis]);
        for (i, k) in self.axes.iter().enumerate() {
            if i != axis {
                out *= k.eval_smooth(x_star[i], x_star[i]);
            }
        }
        Ok(out)
    }

    /// Mixed cross term `∂k_smooth/∂x'_axis(x, x')`; by symmetry of the
    /// smooth part this is `d_dx1(x', x, axis)`.
    pub fn d_dx2(&self, x: &[f64], xp: &[f64], axis: usize) -> Result<f64> {
        self.d_dx1(xp, x, axis)
    }
}

/// Materialized kernel matrix over a fixed point set.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    points: Vec<Vec<f64>>,
    diag_value: f64,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cholesky factorization with an escalating diagonal jitter.
    ///
    /// The first attempt is unjittered so that well-conditioned Grams keep
    /// exact interpolation. If factorization fails the diagonal receives
    /// `1e-8 * k(x,x)` (then 1e-6, 1e-4) before giving up. The jitter that
    /// was used is recorded on the returned factor.
    pub fn factorize(&self) -> Result<GramFactor> {
        chol_with_jitter(&self.matrix, self.diag_value)
            .map(|(chol, jitter)| GramFactor { chol, jitter })
            .ok_or_else(|| Error::singular("kernel Gram matrix (try increasing gamma)"))
    }
}

/// Cholesky factor of a (possibly jittered) Gram matrix.
pub struct GramFactor {
    chol: Cholesky<f64, Dyn>,
    /// Diagonal jitter that was required (0.0 when the plain matrix factorized).
    pub jitter: f64,
}

impl GramFactor {
    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Try Cholesky with jitter ladder {0, 1e-8, 1e-6, 1e-4} * scale.
pub(crate) fn chol_with_jitter(
    m: &DMatrix<f64>,
    scale: f64,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    const LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];
    for &level in LADDER.iter() {
        let jitter = level * scale;
        let candidate = if jitter == 0.0 {
            m.clone()
        } else {
            let mut mj = m.clone();
            for i in 0..m.nrows() {
                mj[(i, i)] += jitter;
            }
            mj
        };
        if let Some(chol) = Cholesky::new(candidate) {
            return Some((chol, jitter));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn se(gamma: f64, beta: f64, lambda: f64) -> AxisKernel {
        AxisKernel::squared_exponential(gamma, beta, lambda).unwrap()
    }

    fn per(gamma: f64, beta: f64, lambda: f64, t: f64) -> AxisKernel {
        AxisKernel::periodic(gamma, beta, lambda, t).unwrap()
    }

    fn pk(axes: Vec<AxisKernel>) -> ProductKernel {
        ProductKernel::new(axes).unwrap()
    }

    #[test]
    fn eval_examples() {
        // Same point: atom fires, exp(0) = 1.
        let k = pk(vec![se(0.001, 1.0, 1.0)]);
        assert_relative_eq!(k.eval(&[0.7], &[0.7]).unwrap(), 1.001, epsilon = 1e-15);

        // One full period apart: smooth part back to beta, atom does not fire.
        let k = pk(vec![per(0.0, 1.0, 1.0, 2.0 * PI)]);
        assert_relative_eq!(k.eval(&[0.0], &[2.0 * PI]).unwrap(), 1.0, epsilon = 1e-12);

        // Half period: sin^2(pi/2) = 1.
        assert_relative_eq!(
            k.eval(&[0.0], &[PI]).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );

        // Product rule across axes.
        // Pick separations where each factor evaluates to 0.5.
        let lam = 1.0;
        let d_se = (0.5f64.ln().abs() * lam).sqrt(); // exp(-d^2) = 0.5
        let k2 = pk(vec![se(0.0, 1.0, lam), per(0.0, 1.0, lam, 2.0 * PI)]);
        let f1 = k2.axes()[0].eval(0.0, d_se);
        assert_relative_eq!(f1, 0.5, epsilon = 1e-12);
        let d_per = (2.0 * PI / PI) * (0.5f64.ln().abs()).sqrt().asin(); // sin^2(pi d/T) = ln 2
        let f2 = k2.axes()[1].eval(0.0, d_per);
        assert_relative_eq!(f2, 0.5, epsilon = 1e-12);
        assert_relative_eq!(
            k2.eval(&[0.0, 0.0], &[d_se, d_per]).unwrap(),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn eval_rejects_dim_mismatch() {
        let k = pk(vec![se(0.0, 1.0, 1.0)]);
        assert!(matches!(
            k.eval(&[0.0, 1.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(k.gram_derivatives(&[vec![0.0]], &[0.0], 1).is_err());
    }

    #[test]
    fn gram_examples() {
        let k = pk(vec![se(0.001, 1.0, 1.0)]);
        let g = k.gram(&[vec![0.3]]).unwrap();
        assert_eq!(g.matrix().nrows(), 1);
        assert_relative_eq!(g.matrix()[(0, 0)], 1.001, epsilon = 1e-15);

        let k = pk(vec![per(0.0, 1.0, 1.0, 2.0 * PI)]);
        let g = k.gram(&[vec![0.0], vec![PI]]).unwrap();
        let e1 = (-1.0f64).exp();
        assert_relative_eq!(g.matrix()[(0, 1)], e1, epsilon = 1e-12);
        assert_relative_eq!(g.matrix()[(1, 0)], e1, epsilon = 1e-12);
        assert_eq!(g.matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn derivative_examples() {
        // d2 of squared-exp at coincident points: 2 beta / lambda.
        let k = pk(vec![se(0.0, 1.0, 1.0)]);
        let (cross, d2) = k.gram_derivatives(&[vec![0.5]], &[0.5], 0).unwrap();
        assert_relative_eq!(d2, 2.0, epsilon = 1e-12);
        // First derivative at x = x' vanishes (odd in the separation).
        assert_eq!(cross[0], 0.0);

        // Periodic first derivative vanishes at half period.
        let k = pk(vec![per(0.0, 1.0, 1.0, 2.0 * PI)]);
        let (cross, _) = k.gram_derivatives(&[vec![0.0]], &[PI], 0).unwrap();
        assert!(cross[0].abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        // Central differences of the smooth part at step 1e-4, rel err < 1e-6.
        let h = 1e-4;
        let kernels = vec![
            pk(vec![se(0.2, 1.3, 0.7)]),
            pk(vec![per(0.1, 0.8, 1.7, 2.0 * PI)]),
            pk(vec![se(0.0, 1.0, 2.0), per(0.05, 1.1, 0.9, 4.0)]),
        ];
        for k in kernels {
            let dim = k.dim();
            let x: Vec<f64> = (0..dim).map(|i| 0.3 + 0.411 * i as f64).collect();
            let xp: Vec<f64> = (0..dim).map(|i| 1.1 - 0.23 * i as f64).collect();
            for axis in 0..dim {
                let analytic = k.d_dx1(&x, &xp, axis).unwrap();
                let mut xh = x.clone();
                xh[axis] += h;
                let mut xl = x.clone();
                xl[axis] -= h;
                let fd =
                    (k.eval_smooth(&xh, &xp).unwrap() - k.eval_smooth(&xl, &xp).unwrap())
                        / (2.0 * h);
                assert_relative_eq!(analytic, fd, max_relative = 1e-6, epsilon = 1e-9);

                // Mixed second derivative at (x*, x*) via nested differences.
                let x_star = &x;
                let mut pp = x_star.clone();
                pp[axis] += h;
                let mut pm = x_star.clone();
                pm[axis] -= h;
                let fd2 = (k.d_dx1(&pp, x_star, axis).unwrap()
                    - k.d_dx1(&pm, x_star, axis).unwrap())
                    / (2.0 * h)
                    * -1.0; // d/dx' = -d/dx for stationary smooth parts
                let analytic2 = k.d2_at(x_star, axis).unwrap();
                assert_relative_eq!(analytic2, fd2, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn factorize_reports_jitter_only_when_needed() {
        let k = pk(vec![se(0.1, 1.0, 1.0)]);
        let g = k.gram(&[vec![0.0], vec![0.5], vec![1.2]]).unwrap();
        let f = g.factorize().unwrap();
        assert_eq!(f.jitter, 0.0);

        // Duplicated points with gamma = 0 make the Gram exactly singular;
        // the ladder must kick in.
        let k0 = pk(vec![se(0.0, 1.0, 1.0)]);
        let g0 = k0.gram(&[vec![0.0], vec![0.0]]).unwrap();
        let f0 = g0.factorize().unwrap();
        assert!(f0.jitter > 0.0);
    }

    proptest! {
        #[test]
        fn diag_value_exact(x in -10.0f64..10.0, gamma in 0.0f64..2.0, beta in 0.1f64..3.0, lambda in 0.1f64..5.0) {
            let k = pk(vec![se(gamma, beta, lambda), per(gamma, beta, lambda, 2.0 * PI)]);
            prop_assert_eq!(k.eval(&[x, x], &[x, x]).unwrap(), k.diag_value());
        }

        #[test]
        fn symmetry_exact(a in -5.0f64..5.0, b in -5.0f64..5.0, lambda in 0.1f64..5.0) {
            let k = pk(vec![se(0.01, 1.0, lambda), per(0.0, 0.7, lambda, 3.0)]);
            let x = [a, b];
            let y = [b, a];
            prop_assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
        }

        #[test]
        fn periodic_smooth_part_is_periodic(x in -5.0f64..5.0, d in -5.0f64..5.0, lambda in 0.2f64..5.0) {
            let t = 2.0 * PI;
            let k = per(0.5, 1.0, lambda, t);
            let base = k.eval_smooth(x, x + d);
            let shifted = k.eval_smooth(x, x + d + t);
            prop_assert!((base - shifted).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn gram_is_numerically_psd(
            n in 1usize..=12,
            seed in 0u64..1000,
            lambda in 0.2f64..4.0,
        ) {
            use rand::Rng;
            let mut rng = crate::util::rng_for_task(seed, 0);
            // Distinct points with gamma >= 1e-6.
            let mut pts: Vec<Vec<f64>> = Vec::new();
            while pts.len() < n {
                let cand = vec![rng.random_range(-3.0..3.0)];
                if pts.iter().all(|p| p[0] != cand[0]) {
                    pts.push(cand);
                }
            }
            let k = pk(vec![se(1e-6, 1.0, lambda)]);
            let g = k.gram(&pts).unwrap();
            let eig = nalgebra::SymmetricEigen::new(g.matrix().clone());
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-8, "min eigenvalue {min}");
        }

        #[test]
        fn gram_equals_transpose(n in 1usize..=8, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::util::rng_for_task(seed, 1);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(0.0..6.0)]).collect();
            let k = pk(vec![se(0.01, 1.2, 1.0), per(0.0, 0.9, 0.8, 2.0 * PI)]);
            let g = k.gram(&pts).unwrap();
            prop_assert_eq!(g.matrix(), &g.matrix().transpose());
        }
    }
}
