//! Objective and gradient-noise oracles.

mod iris;
mod mlp;

pub use iris::{load_iris, parse_iris, Dataset, CLASS_NAMES};
pub use mlp::MlpClassifier;

use crate::linalg::{asymmetry, max_abs, psd_sqrt, symmetrize, Mat, Vector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("noise variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError { row: usize, col: usize, message: String },
    #[error("wrong shape at row {row}: {message}")]
    WrongShape { row: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("matrix must be symmetric (asymmetry {0:e})")]
    NonSymmetric(f64),
    #[error("covariance is not positive semi-definite: {0}")]
    NotPsd(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Value / gradient / Hessian oracle for `f: R^d -> R`.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    fn hessian(&self, x: &Vector) -> Mat;

    /// Hessian-vector product.
    fn hvp(&self, x: &Vector, v: &Vector) -> Vector {
        self.hessian(x) * v
    }

    /// `v ↦ ∇²f(x) v` with any per-point work done once up front.
    fn hessian_operator<'a>(&'a self, x: &Vector) -> Box<dyn Fn(&Vector) -> Vector + Send + Sync + 'a> {
        let h = self.hessian(x);
        Box::new(move |v| &h * v)
    }

    /// The constant Hessian when the objective is `½ xᵀAx`.
    fn as_quadratic(&self) -> Option<&Mat> {
        None
    }
}

/// `f(x) = ½ xᵀAx`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a: Mat,
}

impl QuadraticObjective {
    pub fn new(a: Mat) -> Result<Self, ProblemError> {
        if a.nrows() != a.ncols() {
            return Err(ProblemError::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        let asym = asymmetry(&a);
        if asym > 1e-12 * max_abs(&a) {
            return Err(ProblemError::NonSymmetric(asym));
        }
        Ok(Self { a: symmetrize(&a) })
    }

    pub fn diagonal(eigs: &[f64]) -> Self {
        Self { a: Mat::from_diagonal(&Vector::from_column_slice(eigs)) }
    }

    pub fn matrix(&self) -> &Mat {
        &self.a
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.a * x))
    }

    fn gradient(&self, x: &Vector) -> Vector {
        &self.a * x
    }

    fn hessian(&self, _x: &Vector) -> Mat {
        self.a.clone()
    }

    fn hvp(&self, _x: &Vector, v: &Vector) -> Vector {
        &self.a * v
    }

    fn hessian_operator<'a>(&'a self, _x: &Vector) -> Box<dyn Fn(&Vector) -> Vector + Send + Sync + 'a> {
        Box::new(move |v| &self.a * v)
    }

    fn as_quadratic(&self) -> Option<&Mat> {
        Some(&self.a)
    }
}

/// One-dimensional piecewise quadratic with a shallow minimum at 0 and a
/// deeper one at 5:
///
/// ```text
/// ½x²              x < 1
/// −½(x−2)² + 1     1 ≤ x < 3
/// ¼(x−5)² − ½      x ≥ 3
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct BimodalPiecewise;

impl BimodalPiecewise {
    pub fn curvature(x: f64) -> f64 {
        if x <= 1.0 {
            1.0
        } else if x <= 3.0 {
            -1.0
        } else {
            0.5
        }
    }

    fn derivative(x: f64) -> f64 {
        if x < 1.0 {
            x
        } else if x < 3.0 {
            -(x - 2.0)
        } else {
            0.5 * (x - 5.0)
        }
    }
}

impl Objective for BimodalPiecewise {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &Vector) -> f64 {
        let x = x[0];
        if x < 1.0 {
            0.5 * x * x
        } else if x < 3.0 {
            -0.5 * (x - 2.0).powi(2) + 1.0
        } else {
            0.25 * (x - 5.0).powi(2) - 0.5
        }
    }

    fn gradient(&self, x: &Vector) -> Vector {
        Vector::from_element(1, Self::derivative(x[0]))
    }

    /// At the kinks `x = 1` and `x = 3` the left piece is used.
    fn hessian(&self, x: &Vector) -> Mat {
        Mat::from_element(1, 1, Self::curvature(x[0]))
    }
}

/// `f(x, y) = w₀(1 − cos x) + w₁(1 − cos y) + κ sin x sin y`.
///
/// Smooth and non-quadratic with every derivative bounded; a minimum at the
/// origin when `κ² < w₀w₁`.
#[derive(Debug, Clone, Copy)]
pub struct CosineCoupled {
    pub w: [f64; 2],
    pub kappa: f64,
}

impl Default for CosineCoupled {
    fn default() -> Self {
        Self { w: [1.0, 2.0], kappa: 0.5 }
    }
}

impl Objective for CosineCoupled {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &Vector) -> f64 {
        let (a, b) = (x[0], x[1]);
        self.w[0] * (1.0 - a.cos()) + self.w[1] * (1.0 - b.cos()) + self.kappa * a.sin() * b.sin()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let (a, b) = (x[0], x[1]);
        Vector::from_vec(vec![
            self.w[0] * a.sin() + self.kappa * a.cos() * b.sin(),
            self.w[1] * b.sin() + self.kappa * a.sin() * b.cos(),
        ])
    }

    fn hessian(&self, x: &Vector) -> Mat {
        let (a, b) = (x[0], x[1]);
        let (sa, ca, sb, cb) = (a.sin(), a.cos(), b.sin(), b.cos());
        let off = self.kappa * ca * cb;
        Mat::from_row_slice(
            2,
            2,
            &[self.w[0] * ca - self.kappa * sa * sb, off, off, self.w[1] * cb - self.kappa * sa * sb],
        )
    }
}

/// Central finite-difference Hessian of the analytic gradient, symmetrized.
///
/// Coordinate `i` uses the step `max(h, h·|x_i|)`.
pub fn hessian_fd(obj: &dyn Objective, x: &Vector, h: f64) -> Mat {
    let n = obj.dim();
    let mut hess = Mat::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let step = h.max(h * x[i].abs());
        xp[i] = x[i] + step;
        let gp = obj.gradient(&xp);
        xp[i] = x[i] - step;
        let gm = obj.gradient(&xp);
        xp[i] = x[i];
        hess.set_column(i, &((gp - gm) / (2.0 * step)));
    }
    symmetrize(&hess)
}

/// Gradient-noise oracle: `∇F(x, ξ) = ∇f(x) + ξ`, `ξ ~ N(0, Σ(x))`.
pub trait NoiseModel: Send + Sync {
    fn dim(&self) -> usize;
    fn covariance(&self, x: &Vector) -> Mat;

    /// Symmetric square root of `Σ(x)`.
    fn factor(&self, x: &Vector) -> Mat;

    /// Maps a standard normal vector to a noise sample at `x`.
    fn transform(&self, x: &Vector, zeta: &Vector) -> Vector {
        self.factor(x) * zeta
    }

    fn sample(&self, x: &Vector, rng: &mut dyn RngCore) -> Vector {
        let zeta = standard_normal_vector(self.dim(), rng);
        self.transform(x, &zeta)
    }

    /// `Σ` when it does not depend on `x`.
    fn constant_covariance(&self) -> Option<&Mat> {
        None
    }

    /// `σ²` when `Σ ≡ σ²I`.
    fn isotropic_variance(&self) -> Option<f64> {
        None
    }
}

pub fn standard_normal_vector(n: usize, rng: &mut dyn RngCore) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `Σ ≡ σ²I`.
#[derive(Debug, Clone)]
pub struct IsotropicNoise {
    sigma2: f64,
    sigma: f64,
    cov: Mat,
}

pub fn make_isotropic_noise(dim: usize, sigma2: f64) -> Result<IsotropicNoise, ProblemError> {
    if !(sigma2 >= 0.0) {
        return Err(ProblemError::NegativeVariance(sigma2));
    }
    Ok(IsotropicNoise { sigma2, sigma: sigma2.sqrt(), cov: Mat::identity(dim, dim) * sigma2 })
}

impl NoiseModel for IsotropicNoise {
    fn dim(&self) -> usize {
        self.cov.nrows()
    }

    fn covariance(&self, _x: &Vector) -> Mat {
        self.cov.clone()
    }

    fn factor(&self, _x: &Vector) -> Mat {
        Mat::identity(self.dim(), self.dim()) * self.sigma
    }

    fn transform(&self, _x: &Vector, zeta: &Vector) -> Vector {
        zeta * self.sigma
    }

    fn constant_covariance(&self) -> Option<&Mat> {
        Some(&self.cov)
    }

    fn isotropic_variance(&self) -> Option<f64> {
        Some(self.sigma2)
    }
}

/// Constant, possibly anisotropic `Σ`.
#[derive(Debug, Clone)]
pub struct ConstantNoise {
    cov: Mat,
    root: Mat,
}

impl ConstantNoise {
    pub fn new(cov: Mat) -> Result<Self, ProblemError> {
        let asym = asymmetry(&cov);
        if asym > 1e-12 * max_abs(&cov) {
            return Err(ProblemError::NonSymmetric(asym));
        }
        let cov = symmetrize(&cov);
        let tol = crate::linalg::default_psd_tol(&cov);
        let root = psd_sqrt(&cov, tol).map_err(|e| ProblemError::NotPsd(e.to_string()))?;
        Ok(Self { cov, root })
    }
}

impl NoiseModel for ConstantNoise {
    fn dim(&self) -> usize {
        self.cov.nrows()
    }

    fn covariance(&self, _x: &Vector) -> Mat {
        self.cov.clone()
    }

    fn factor(&self, _x: &Vector) -> Mat {
        self.root.clone()
    }

    fn transform(&self, _x: &Vector, zeta: &Vector) -> Vector {
        &self.root * zeta
    }

    fn constant_covariance(&self) -> Option<&Mat> {
        Some(&self.cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_gradient(obj: &dyn Objective, x: &Vector, h: f64) -> Vector {
        let mut xp = x.clone();
        Vector::from_fn(obj.dim(), |i, _| {
            xp[i] = x[i] + h;
            let fp = obj.value(&xp);
            xp[i] = x[i] - h;
            let fm = obj.value(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
    }

    #[test]
    fn quadratic_oracles() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, -1.0]);
        let q = QuadraticObjective::new(a.clone()).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.2]);
        assert_eq!(q.value(&x), 0.5 * x.dot(&(&a * &x)));
        assert_eq!(q.hessian(&x), q.hessian(&Vector::zeros(2)));
        assert!(max_abs(&(hessian_fd(&q, &x, 1e-4) - &a)) < 1e-7);
        assert!(QuadraticObjective::new(Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn bimodal_shape() {
        let f = BimodalPiecewise;
        let v = |x: f64| f.value(&Vector::from_element(1, x));
        assert_eq!(v(0.0), 0.0);
        assert_eq!(v(5.0), -0.5);
        assert!((v(1.0 - 1e-12) - v(1.0)).abs() < 1e-9);
        assert!((v(3.0 - 1e-12) - v(3.0)).abs() < 1e-9);
        assert_eq!(f.gradient(&Vector::from_element(1, 0.0))[0], 0.0);
        assert_eq!(f.gradient(&Vector::from_element(1, 5.0))[0], 0.0);
        let h = hessian_fd(&f, &Vector::from_element(1, 0.5), 1e-4);
        assert!((h[(0, 0)] - 1.0).abs() < 1e-6);
        assert_eq!(f.hessian(&Vector::from_element(1, 1.0))[(0, 0)], 1.0);
        assert_eq!(f.hessian(&Vector::from_element(1, 3.0))[(0, 0)], -1.0);
    }

    #[test]
    fn cosine_coupled_derivatives() {
        let f = CosineCoupled { w: [1.0, 2.0], kappa: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = Vector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let g = f.gradient(&x);
            assert!((g.clone() - fd_gradient(&f, &x, 1e-5)).norm() <= 1e-5 * g.norm().max(1e-3));
            let h = f.hessian(&x);
            assert!(max_abs(&(hessian_fd(&f, &x, 1e-5) - &h)) <= 1e-4 * max_abs(&h).max(1e-3));
        }
    }

    #[test]
    fn isotropic_noise_examples() {
        let zero = make_isotropic_noise(3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(zero.sample(&Vector::zeros(3), &mut rng), Vector::zeros(3));
        let one = make_isotropic_noise(2, 1.0).unwrap();
        assert_eq!(one.covariance(&Vector::zeros(2)), Mat::identity(2, 2));
        assert!(matches!(make_isotropic_noise(2, -1.0), Err(ProblemError::NegativeVariance(_))));
    }

    fn empirical_cov(noise: &dyn NoiseModel, n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = noise.dim();
        let x = Vector::zeros(d);
        let mut acc = Mat::zeros(d, d);
        for _ in 0..n {
            let s = noise.sample(&x, &mut rng);
            acc += &s * s.transpose();
        }
        acc / n as f64
    }

    #[test]
    fn noise_sample_covariance_within_five_percent() {
        let iso = make_isotropic_noise(2, 1.0).unwrap();
        let emp = empirical_cov(&iso, 100_000, 3);
        assert!((emp - iso.covariance(&Vector::zeros(2))).norm() < 0.05 * 2f64.sqrt());

        let sigma = Mat::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let c = ConstantNoise::new(sigma.clone()).unwrap();
        let emp = empirical_cov(&c, 100_000, 4);
        assert!((emp - &sigma).norm() < 0.05 * sigma.norm());
    }
}
