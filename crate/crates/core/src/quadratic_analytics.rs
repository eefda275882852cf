//! Exact Gaussian laws on quadratic objectives `f(x) = ½ xᵀAx`.
//!
//! Everything is evaluated in the eigenbasis of `A`, where each law reduces to
//! elementwise scalar formulas.

use crate::coefficients::log1p_ratio;
use crate::linalg::{
    eig_sym, hermitian_eigenvalues, hermitian_psd_sqrt, max_abs, max_abs_c, to_complex, CMat, CVector,
    EigenDecomposition, LinalgError, Mat, Vector,
};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

const SINGULAR_TOL: f64 = 1e-14;
/// Below this `|z|`, `(e^{tz} − 1)/z` is replaced by its limit `t`.
const OU_LIMIT_TOL: f64 = 1e-10;
pub const MATCH_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadraticError {
    #[error("step size is singular: ηλ = 1 for eigenvalue {eigenvalue}")]
    SingularStepsize { eigenvalue: f64 },
    #[error("target covariance is not PSD (min eigenvalue {min_eigenvalue:e}); no complex OU process matches")]
    Unmatchable { min_eigenvalue: f64 },
    #[error("exact-match conditions violated: {0}")]
    MatchConditionsViolated(String),
    #[error("match assertion failed: mean residual {mean:e}, covariance residual {cov:e}")]
    MatchFailed { mean: f64, cov: f64 },
    #[error("basis is not orthogonal (residual {0:e})")]
    NonOrthogonalBasis(f64),
    #[error("law has imaginary residue {0:e}; no real Gaussian law")]
    ComplexLaw(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: Vector,
    pub cov: Mat,
}

impl GaussianLaw {
    pub fn delta(x0: &Vector) -> Self {
        let n = x0.len();
        Self { mean: x0.clone(), cov: Mat::zeros(n, n) }
    }

    /// `E[½ xᵀMx]`.
    pub fn expected_quadratic(&self, m: &Mat) -> f64 {
        0.5 * (self.mean.dot(&(m * &self.mean)) + (m * &self.cov).trace())
    }
}

/// Complex Gaussian law: mean, covariance `Γ = E[(z−μ)(z−μ)ᴴ]` and
/// pseudo-covariance `C = E[(z−μ)(z−μ)ᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGaussianLaw {
    pub mean: CVector,
    pub gamma: CMat,
    pub pseudo: CMat,
}

impl ComplexGaussianLaw {
    /// Law of `Re z`: mean `Re μ`, covariance `Re(Γ + C)/2`.
    pub fn real_part(&self) -> GaussianLaw {
        GaussianLaw {
            mean: self.mean.map(|z| z.re),
            cov: (&self.gamma + &self.pseudo).map(|z| z.re * 0.5),
        }
    }

    /// Covariance of `Im z`: `Re(Γ − C)/2`.
    pub fn imaginary_cov(&self) -> Mat {
        (&self.gamma - &self.pseudo).map(|z| z.re * 0.5)
    }

    pub fn from_real(law: &GaussianLaw) -> Self {
        Self { mean: law.mean.map(|v| Complex64::new(v, 0.0)), gamma: to_complex(&law.cov), pseudo: to_complex(&law.cov) }
    }
}

/// `(e^{z} − 1)` accurate near zero.
fn cexpm1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-3 {
        let mut term = z;
        let mut acc = z;
        for k in 2..=8 {
            term = term * z / k as f64;
            acc += term;
        }
        acc
    } else {
        z.exp() - 1.0
    }
}

/// `∫₀ᵗ e^{τz} dτ`.
fn ou_integral(z: Complex64, t: f64) -> Complex64 {
    if z.norm() < OU_LIMIT_TOL {
        Complex64::new(t, 0.0)
    } else {
        cexpm1(z * t) / z
    }
}

fn check_not_singular(decomp: &EigenDecomposition, eta: f64) -> Result<(), QuadraticError> {
    for &l in decomp.values.iter() {
        if (1.0 - eta * l).abs() < SINGULAR_TOL {
            return Err(QuadraticError::SingularStepsize { eigenvalue: l });
        }
    }
    Ok(())
}

/// SGD on `½ xᵀAx` with additive `N(0, Σ)` noise:
/// mean `(I − ηA)ᵏx₀`, covariance `η² Σ_{m<k} (I − ηA)ᵐ Σ (I − ηA)ᵐ`.
pub fn sgd_law(a: &Mat, sigma: &Mat, eta: f64, x0: &Vector, k: usize) -> Result<GaussianLaw, QuadraticError> {
    let dec = eig_sym(a)?;
    let n = dec.dim();
    let r: Vec<f64> = dec.values.iter().map(|l| 1.0 - eta * l).collect();
    let st = dec.to_eigenbasis(sigma);
    let mut cov = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = r[i] * r[j];
            let mut sum = 0.0;
            for _ in 0..k {
                sum = sum * w + 1.0;
            }
            cov[(i, j)] = eta * eta * st[(i, j)] * sum;
        }
    }
    let mean = dec.map_real(|l| (1.0 - eta * l).powi(k as i32)) * x0;
    Ok(GaussianLaw { mean, cov: crate::linalg::symmetrize(&dec.from_eigenbasis(&cov)) })
}

fn linear_ou_law(a: &Mat, sigma2: f64, eta: f64, x0: &Vector, t: f64, rate: impl Fn(f64) -> f64) -> Result<GaussianLaw, QuadraticError> {
    let dec = eig_sym(a)?;
    let mean = dec.map_real(|l| (-rate(l) * t).exp()) * x0;
    let cov = dec.map_real(|l| {
        let mu = rate(l);
        let integral = if (mu * t).abs() < 1e-300 { t } else { -(-2.0 * mu * t).exp_m1() / (2.0 * mu) };
        eta * sigma2 * integral
    });
    Ok(GaussianLaw { mean, cov: crate::linalg::symmetrize(&cov) })
}

/// SME-1, `dX = −AX dt + √(ησ²) dW`.
pub fn sme1_law(a: &Mat, sigma2: f64, eta: f64, x0: &Vector, t: f64) -> Result<GaussianLaw, QuadraticError> {
    linear_ou_law(a, sigma2, eta, x0, t, |l| l)
}

/// SME-2, `dX = −(A + ηA²/2)X dt + √(ησ²) dW`.
pub fn sme2_law(a: &Mat, sigma2: f64, eta: f64, x0: &Vector, t: f64) -> Result<GaussianLaw, QuadraticError> {
    linear_ou_law(a, sigma2, eta, x0, t, |l| l + 0.5 * eta * l * l)
}

/// SPF, `dX = U log(I − ηΛ)/η Uᵀ X dt + √(ησ²) dW`.
///
/// When some `ηλ > 1` the same formulas are evaluated with complex logs and
/// the law is returned only if its imaginary residue is below `1e-9`.
pub fn spf_law(a: &Mat, sigma2: f64, eta: f64, x0: &Vector, t: f64) -> Result<GaussianLaw, QuadraticError> {
    let dec = eig_sym(a)?;
    check_not_singular(&dec, eta)?;
    let n = dec.dim();
    let rates: Vec<Complex64> = dec
        .values
        .iter()
        .map(|&l| crate::linalg::log_one_minus(eta * l).map(|v| v / eta))
        .collect::<Result<_, _>>()?;
    let u = &dec.vectors;
    let mean_factor: Vec<Complex64> = rates.iter().map(|s| (s * t).exp()).collect();
    let cov_factor: Vec<Complex64> = rates.iter().map(|s| ou_integral(2.0 * s, t) * (eta * sigma2)).collect();
    let residue = mean_factor.iter().chain(&cov_factor).map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue > 1e-9 {
        return Err(QuadraticError::ComplexLaw(residue));
    }
    let mean_diag = Mat::from_diagonal(&Vector::from_iterator(n, mean_factor.iter().map(|z| z.re)));
    let cov_diag = Mat::from_diagonal(&Vector::from_iterator(n, cov_factor.iter().map(|z| z.re)));
    Ok(GaussianLaw {
        mean: u * mean_diag * u.transpose() * x0,
        cov: crate::linalg::symmetrize(&(u * cov_diag * u.transpose())),
    })
}

/// Complex OU process `dZ = BZ dt + D dW` with `B = U diag(s) Uᵀ`, `U` real
/// orthogonal and `W` a real Brownian motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexOu {
    pub u: Mat,
    pub s: Vec<Complex64>,
    pub d: CMat,
}

impl ComplexOu {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn b(&self) -> CMat {
        let u = to_complex(&self.u);
        let sd = CMat::from_diagonal(&CVector::from_column_slice(&self.s));
        &u * sd * u.transpose()
    }

    /// `U e^{t diag(s)} Uᵀ`.
    pub fn propagator(&self, t: f64) -> CMat {
        let u = to_complex(&self.u);
        let e = CMat::from_diagonal(&CVector::from_iterator(self.dim(), self.s.iter().map(|s| (s * t).exp())));
        &u * e * u.transpose()
    }
}

/// HA-SME drift exponents `s_i = log(1 − ηλ_i)/η` and eigenbasis of `A`.
pub fn hasme_exponents(a: &Mat, eta: f64) -> Result<(EigenDecomposition, Vec<Complex64>), QuadraticError> {
    let dec = eig_sym(a)?;
    check_not_singular(&dec, eta)?;
    let s = dec
        .values
        .iter()
        .map(|&l| crate::linalg::log_one_minus(eta * l).map(|v| v / eta))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((dec, s))
}

pub fn complex_ou_law(ou: &ComplexOu, x0: &CVector, t: f64) -> Result<ComplexGaussianLaw, QuadraticError> {
    let n = ou.dim();
    let orth = max_abs(&(ou.u.transpose() * &ou.u - Mat::identity(n, n)));
    if orth > 1e-10 {
        return Err(QuadraticError::NonOrthogonalBasis(orth));
    }
    let u = to_complex(&ou.u);
    let ut = u.transpose();
    let g = &ut * &ou.d * ou.d.adjoint() * &u;
    let p = &ut * &ou.d * ou.d.transpose() * &u;
    let gamma_t = CMat::from_fn(n, n, |i, j| g[(i, j)] * ou_integral(ou.s[i] + ou.s[j].conj(), t));
    let pseudo_t = CMat::from_fn(n, n, |i, j| p[(i, j)] * ou_integral(ou.s[i] + ou.s[j], t));
    let mut gamma = &u * gamma_t * &ut;
    let pseudo = &u * pseudo_t * &ut;
    // exact Hermitian symmetry
    gamma = (&gamma + gamma.adjoint()).map(|z| z * 0.5);
    Ok(ComplexGaussianLaw { mean: ou.propagator(t) * x0, gamma, pseudo: (&pseudo + pseudo.transpose()).map(|z| z * 0.5) })
}

struct MatchTerms {
    sigma_tilde: Mat,
    /// `log |1 − ηλ_i|`.
    log_abs: Vec<f64>,
    /// `1` when `ηλ_i > 1` (principal log picks up `iπ`).
    branch: Vec<f64>,
    z: Vec<f64>,
}

fn match_terms(a: &Mat, sigma: &Mat, eta: f64) -> Result<MatchTerms, QuadraticError> {
    let dec = eig_sym(a)?;
    check_not_singular(&dec, eta)?;
    let z: Vec<f64> = dec.values.iter().map(|l| eta * l).collect();
    let log_abs = z.iter().map(|z| (1.0 - z).abs().ln()).collect();
    let branch = z.iter().map(|&z| if z > 1.0 { 1.0 } else { 0.0 }).collect();
    let sigma_tilde = dec.to_eigenbasis(sigma);
    Ok(MatchTerms { sigma_tilde, log_abs, branch, z })
}

/// `ln|w|/(w − 1)` with `w − 1 = d`, continuous at `w = 1`.
fn real_ratio(d: f64, log_abs_sum: f64) -> f64 {
    if 1.0 + d > 0.0 {
        log1p_ratio(d)
    } else {
        log_abs_sum / d
    }
}

/// Target of `(UᵀD)(UᵀD)ᴴ` in the eigenbasis:
/// `M_ij = η Σ̃_ij (log(1−ηλ_i) + conj log(1−ηλ_j)) / ((1−ηλ_i)(1−ηλ_j) − 1)`.
pub fn match_cov_target(a: &Mat, sigma: &Mat, eta: f64) -> Result<CMat, QuadraticError> {
    let t = match_terms(a, sigma, eta)?;
    let n = t.z.len();
    Ok(CMat::from_fn(n, n, |i, j| {
        let d = t.z[i] * t.z[j] - t.z[i] - t.z[j];
        let re = real_ratio(d, t.log_abs[i] + t.log_abs[j]);
        let im = PI * (t.branch[i] - t.branch[j]) / d;
        Complex64::new(re, im) * (eta * t.sigma_tilde[(i, j)])
    }))
}

/// Target of `(UᵀD)(UᵀD)ᵀ`: as [`match_cov_target`] without the conjugate.
pub fn match_pseudo_target(a: &Mat, sigma: &Mat, eta: f64) -> Result<CMat, QuadraticError> {
    let t = match_terms(a, sigma, eta)?;
    let n = t.z.len();
    Ok(CMat::from_fn(n, n, |i, j| {
        let d = t.z[i] * t.z[j] - t.z[i] - t.z[j];
        let im_part = PI * (t.branch[i] + t.branch[j]);
        let value = if im_part == 0.0 {
            Complex64::new(real_ratio(d, t.log_abs[i] + t.log_abs[j]), 0.0)
        } else {
            Complex64::new(t.log_abs[i] + t.log_abs[j], im_part) / d
        };
        value * (eta * t.sigma_tilde[(i, j)])
    }))
}

/// Smallest eigenvalue of the Hermitian covariance target.
pub fn match_cov_min_eigenvalue(a: &Mat, sigma: &Mat, eta: f64) -> Result<f64, QuadraticError> {
    let m = match_cov_target(a, sigma, eta)?;
    Ok(hermitian_eigenvalues(&m)?[0])
}

/// `D = U √M` for the covariance target `M`, or `Unmatchable` when `M` has a
/// negative eigenvalue.
pub fn complex_match_d(a: &Mat, sigma: &Mat, eta: f64) -> Result<CMat, QuadraticError> {
    let m = match_cov_target(a, sigma, eta)?;
    let scale = max_abs_c(&m);
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let min = hermitian_eigenvalues(&m)?.first().copied().unwrap_or(0.0);
    if min < -tol {
        return Err(QuadraticError::Unmatchable { min_eigenvalue: min });
    }
    let root = hermitian_psd_sqrt(&m, tol)?;
    let dec = eig_sym(a)?;
    Ok(to_complex(&dec.vectors) * root)
}

/// Largest step size for which HA-SME's diffusion-square is guaranteed PSD:
/// `(1/‖A‖)·min{1 − √(1 − λ_min(Σ)/(√d λ_max(Σ))), 1 − √2/2}`.
pub fn bar_eta(a: &Mat, sigma: &Mat) -> Result<f64, QuadraticError> {
    let norm = eig_sym(a)?.spectral_radius();
    let sd = eig_sym(sigma)?;
    let d = sd.dim() as f64;
    let (lmin, lmax) = (sd.values[0], sd.values[sd.dim() - 1]);
    let ratio = if lmax > 0.0 { (lmin / (d.sqrt() * lmax)).max(0.0) } else { 1.0 };
    let c = (1.0 - (1.0 - ratio).sqrt()).min(1.0 - std::f64::consts::FRAC_1_SQRT_2);
    Ok(if norm > 0.0 { c / norm } else { f64::INFINITY })
}

pub fn commutes(a: &Mat, sigma: &Mat) -> bool {
    let scale = (max_abs(a) * max_abs(sigma)).max(f64::MIN_POSITIVE);
    max_abs(&(a * sigma - sigma * a)) <= 1e-8 * scale
}

fn min_eigenvalue(m: &Mat) -> Result<f64, QuadraticError> {
    Ok(eig_sym(m)?.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// HA-SME law against SGD on a quadratic, with every residual reported.
#[derive(Debug, Clone)]
pub struct HasmeMatch {
    /// `(Re μ, Re Γ)`; equals the SGD law when the match holds.
    pub law: GaussianLaw,
    pub complex: ComplexGaussianLaw,
    pub sgd: GaussianLaw,
    pub mean_residual: f64,
    pub imag_mean: f64,
    pub gamma_residual: f64,
    pub pseudo_residual: f64,
    /// Whether the pseudo-covariance also matches, i.e. `Re z` itself has
    /// the SGD law. Fails for modes with `ηλ > 1`.
    pub desideratum_holds: bool,
}

/// Builds the HA-SME complex OU process on `(A, Σ, η)`, propagates it to
/// `t = kη` and checks its mean and covariance against [`sgd_law`].
pub fn hasme_law_quadratic(a: &Mat, sigma: &Mat, eta: f64, x0: &Vector, k: usize) -> Result<HasmeMatch, QuadraticError> {
    let commuting = commutes(a, sigma);
    if !commuting {
        let positive = min_eigenvalue(sigma)? > 0.0;
        let bound = bar_eta(a, sigma)?;
        if !positive || eta > bound {
            return Err(QuadraticError::MatchConditionsViolated(format!(
                "A and Σ do not commute, and {} (η = {eta}, bound {bound:.6})",
                if positive { "η exceeds the PSD threshold" } else { "Σ is not positive definite" }
            )));
        }
    }
    let d = complex_match_d(a, sigma, eta)?;
    let (dec, s) = hasme_exponents(a, eta)?;
    let ou = ComplexOu { u: dec.vectors.clone(), s, d };
    let complex = complex_ou_law(&ou, &x0.map(|v| Complex64::new(v, 0.0)), k as f64 * eta)?;
    let sgd = sgd_law(a, sigma, eta, x0, k)?;

    let mean_scale = sgd.mean.amax().max(x0.amax()).max(1.0);
    let cov_scale = max_abs(&sgd.cov).max(f64::MIN_POSITIVE);
    let mean_residual = (complex.mean.map(|z| z.re) - &sgd.mean).amax();
    let imag_mean = complex.mean.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let sgd_c = to_complex(&sgd.cov);
    let gamma_residual = max_abs_c(&(&complex.gamma - &sgd_c));
    let pseudo_residual = max_abs_c(&(&complex.pseudo - &sgd_c));

    let mean_ok = mean_residual <= MATCH_TOL * mean_scale && imag_mean <= MATCH_TOL * mean_scale;
    let cov_ok = gamma_residual <= MATCH_TOL * cov_scale.max(1e-300) || (k == 0 && gamma_residual == 0.0);
    if !(mean_ok && cov_ok) {
        return Err(QuadraticError::MatchFailed { mean: mean_residual.max(imag_mean), cov: gamma_residual });
    }
    let desideratum_holds = desideratum_check(&complex, &sgd);
    let law = GaussianLaw { mean: complex.mean.map(|z| z.re), cov: complex.gamma.map(|z| z.re) };
    Ok(HasmeMatch { law, complex, sgd, mean_residual, imag_mean, gamma_residual, pseudo_residual, desideratum_holds })
}

/// Whether the complex law reproduces the real law: `Re μ = mean`, `Im μ = 0`
/// and `Γ = C = cov`. Entry `(i, j)` of each covariance is compared to
/// `1e-8·(1 + √(cov_ii cov_jj))`, so a fast-growing mode cannot hide a
/// mismatch in a slow one.
pub fn desideratum_check(cl: &ComplexGaussianLaw, rl: &GaussianLaw) -> bool {
    let n = rl.mean.len();
    if cl.mean.len() != n {
        return false;
    }
    let mean_ok = (0..n).all(|i| {
        let tol = MATCH_TOL * (1.0 + rl.mean[i].abs());
        (cl.mean[i].re - rl.mean[i]).abs() <= tol && cl.mean[i].im.abs() <= tol
    });
    let cov_ok = (0..n).all(|i| {
        (0..n).all(|j| {
            let tol = MATCH_TOL * (1.0 + (rl.cov[(i, i)] * rl.cov[(j, j)]).abs().sqrt());
            let target = Complex64::new(rl.cov[(i, j)], 0.0);
            (cl.gamma[(i, j)] - target).norm() <= tol && (cl.pseudo[(i, j)] - target).norm() <= tol
        })
    });
    mean_ok && cov_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&Vector::from_column_slice(v))
    }

    fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Mat {
        let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        eig_sym(&(&b + b.transpose())).unwrap().vectors
    }

    #[test]
    fn sgd_law_examples() {
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let a = diag(&[1.0, -1.0]);
        let i2 = Mat::identity(2, 2);
        let l0 = sgd_law(&a, &i2, 2.1, &x0, 0).unwrap();
        assert_eq!(l0, GaussianLaw::delta(&x0));
        let l3 = sgd_law(&a, &i2, 2.1, &x0, 3).unwrap();
        assert!((l3.mean[0] + 1.331).abs() < 1e-12);
        assert!((l3.mean[1] - 29.791).abs() < 1e-10);

        // escape from the minimum of ½|x|² when η > 2
        let mut prev = 0.0;
        for k in 1..8 {
            let l = sgd_law(&i2, &i2, 2.1, &x0, k).unwrap();
            let tr = l.cov.trace();
            assert!(tr > prev);
            prev = tr;
        }
        assert!(prev > 10.0);
    }

    #[test]
    fn sgd_law_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = 3;
            let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &b + b.transpose();
            let c = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let sigma = &c * c.transpose();
            let eta = rng.gen_range(0.05..0.5);
            let x0 = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let g = Mat::identity(n, n) - &a * eta;
            for k in 0..6 {
                let lk = sgd_law(&a, &sigma, eta, &x0, k).unwrap();
                let lk1 = sgd_law(&a, &sigma, eta, &x0, k + 1).unwrap();
                let rec = &g * &lk.cov * &g + &sigma * (eta * eta);
                assert!(max_abs(&(lk1.cov - rec)) < 1e-12);
                assert!((lk1.mean - &g * &lk.mean).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn ou_laws_at_time_zero_are_deltas() {
        let a = diag(&[0.5, -1.0]);
        let x0 = Vector::from_vec(vec![0.3, 0.7]);
        for law in [sme1_law(&a, 1.0, 0.1, &x0, 0.0), sme2_law(&a, 1.0, 0.1, &x0, 0.0), spf_law(&a, 1.0, 0.1, &x0, 0.0)] {
            let law = law.unwrap();
            assert!((law.mean - &x0).amax() < 1e-15);
            assert_eq!(max_abs(&law.cov), 0.0);
        }
    }

    #[test]
    fn sme1_scalar_integral() {
        let law = sme1_law(&diag(&[1.0]), 1.0, 0.1, &Vector::zeros(1), 1.0).unwrap();
        let expected = 0.1 * (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((law.cov[(0, 0)] - expected).abs() < 1e-15);
        let stat = sme1_law(&Mat::identity(2, 2), 1.0, 0.3, &Vector::zeros(2), 200.0).unwrap();
        assert!(max_abs(&(stat.cov - Mat::identity(2, 2) * 0.15)) < 1e-12);
    }

    #[test]
    fn sme2_stationary_covariance() {
        let eta = 2.5;
        let law = sme2_law(&Mat::identity(2, 2), 1.0, eta, &Vector::zeros(2), 100.0).unwrap();
        let expected = eta / (2.0 + eta);
        assert!(max_abs(&(law.cov - Mat::identity(2, 2) * expected)) < 1e-12);
    }

    #[test]
    fn sme2_saddle_variance_bounded_sgd_diverges() {
        let a = diag(&[1.0, -1.0]);
        let eta = 2.1;
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let mut prev = 0.0;
        for k in 1..=12 {
            let v = sme2_law(&a, 1.0, eta, &x0, k as f64 * eta).unwrap().cov[(1, 1)];
            assert!(v >= prev && v < eta / (-2.0 + eta));
            prev = v;
        }
        let sgd = sgd_law(&a, &Mat::identity(2, 2), eta, &x0, 12).unwrap();
        assert!(sgd.cov[(1, 1)] > 1e8);
    }

    #[test]
    fn spf_one_step_variance_vanishes_near_singular_step() {
        let mut prev = f64::INFINITY;
        for eta in [0.9, 0.99, 0.999, 0.9999] {
            let law = spf_law(&diag(&[1.0]), 1.0, eta, &Vector::from_element(1, 1.0), eta).unwrap();
            assert!((law.mean[0] - (1.0 - eta)).abs() < 1e-12);
            assert!(law.cov[(0, 0)] < prev);
            prev = law.cov[(0, 0)];
        }
        assert!(prev < 0.1);
        assert!(matches!(spf_law(&diag(&[1.0]), 1.0, 1.0, &Vector::zeros(1), 1.0), Err(QuadraticError::SingularStepsize { .. })));
    }

    #[test]
    fn complex_ou_trivial_cases() {
        let ou = ComplexOu { u: Mat::identity(2, 2), s: vec![Complex64::new(0.0, 0.0); 2], d: CMat::zeros(2, 2) };
        let x0 = CVector::from_element(2, Complex64::new(1.0, 0.0));
        let law = complex_ou_law(&ou, &x0, 1.0).unwrap();
        assert_eq!(max_abs_c(&law.gamma), 0.0);
        let bm = ComplexOu { d: CMat::identity(2, 2), ..ou.clone() };
        let law = complex_ou_law(&bm, &x0, 1.0).unwrap();
        assert!(max_abs_c(&(law.gamma - CMat::identity(2, 2))) < 1e-15);
        assert!(max_abs_c(&(law.pseudo - CMat::identity(2, 2))) < 1e-15);
        let bad = ComplexOu { u: Mat::identity(2, 2) * 2.0, ..ou };
        assert!(matches!(complex_ou_law(&bad, &x0, 1.0), Err(QuadraticError::NonOrthogonalBasis(_))));
    }

    #[test]
    fn hard_instance_is_unmatchable() {
        let a = diag(&[1.0, -1.0]);
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        for eta in [0.1, 0.5, 1.5, 2.5, 5.0] {
            let min = match_cov_min_eigenvalue(&a, &sigma, eta).unwrap();
            assert!(min < -1e-6, "η={eta}: {min}");
            assert!(matches!(complex_match_d(&a, &sigma, eta), Err(QuadraticError::Unmatchable { .. })));
        }
        // independent numbers for η = 0.1 and 0.5
        assert!((match_cov_min_eigenvalue(&a, &sigma, 0.1).unwrap() + 2.85e-4).abs() < 1e-6);
        assert!((match_cov_min_eigenvalue(&a, &sigma, 0.5).unwrap() + 0.0549).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_gives_zero_factor() {
        let d = complex_match_d(&diag(&[1.0, 2.0]), &Mat::zeros(2, 2), 0.3).unwrap();
        assert_eq!(max_abs_c(&d), 0.0);
    }

    #[test]
    fn commuting_match_satisfies_both_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let u = random_orthogonal(3, &mut rng);
        let a = &u * diag(&[0.5, 1.0, 2.0]) * u.transpose();
        let sigma = &u * diag(&[1.0, 0.3, 2.0]) * u.transpose();
        let eta = 0.25;
        let d = complex_match_d(&a, &sigma, eta).unwrap();
        let dec = eig_sym(&a).unwrap();
        let ud = to_complex(&dec.vectors).transpose() * &d;
        let cov_t = match_cov_target(&a, &sigma, eta).unwrap();
        let pc_t = match_pseudo_target(&a, &sigma, eta).unwrap();
        assert!(max_abs_c(&(&ud * ud.adjoint() - cov_t)) < 1e-9);
        assert!(max_abs_c(&(&ud * ud.transpose() - pc_t)) < 1e-9);
    }

    #[test]
    fn commuting_match_equals_sgd() {
        let a = diag(&[1.0, 2.0]);
        let sigma = diag(&[3.0, 4.0]);
        let x0 = Vector::from_vec(vec![1.0, -2.0]);
        let m = hasme_law_quadratic(&a, &sigma, 0.3, &x0, 5).unwrap();
        assert!((m.law.mean - &m.sgd.mean).amax() < 1e-9);
        assert!(max_abs(&(m.law.cov - &m.sgd.cov)) < 1e-9);
        assert!(m.desideratum_holds);
        let m0 = hasme_law_quadratic(&a, &sigma, 0.3, &x0, 0).unwrap();
        assert_eq!(m0.law.mean, x0);
        assert!(max_abs(&m0.law.cov) == 0.0);
    }

    #[test]
    fn large_step_saddle_matches_mean_and_covariance() {
        let a = diag(&[1.0, -1.0]);
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let m = hasme_law_quadratic(&a, &Mat::identity(2, 2), 2.1, &x0, 4).unwrap();
        assert!(m.imag_mean <= 1e-10 * m.sgd.mean.amax());
        assert!((m.law.mean - &m.sgd.mean).amax() <= 1e-9 * m.sgd.mean.amax());
        assert!(m.gamma_residual <= 1e-9 * max_abs(&m.sgd.cov));
        // a mode with ηλ > 1 cannot match the pseudo-covariance as well
        assert!(!m.desideratum_holds);
        assert!(m.pseudo_residual > 1.0);
        let mcov = match_cov_target(&a, &Mat::identity(2, 2), 2.1).unwrap();
        let mpc = match_pseudo_target(&a, &Mat::identity(2, 2), 2.1).unwrap();
        assert!(mpc[(1, 1)].norm() > mcov[(1, 1)].re);
    }

    #[test]
    fn non_commuting_below_threshold_matches() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.4, 0.4, -0.5]);
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let bound = bar_eta(&a, &sigma).unwrap();
        let x0 = Vector::from_vec(vec![0.5, 1.0]);
        let m = hasme_law_quadratic(&a, &sigma, 0.9 * bound, &x0, 7).unwrap();
        assert!(m.desideratum_holds);
        assert!(matches!(
            hasme_law_quadratic(&a, &sigma, 3.0 * bound, &x0, 7),
            Err(QuadraticError::MatchConditionsViolated(_))
        ));
    }

    #[test]
    fn bar_eta_example() {
        let b = bar_eta(&diag(&[1.0, -0.5]), &Mat::identity(2, 2)).unwrap();
        assert!((b - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn desideratum_detects_perturbation() {
        let law = sgd_law(&diag(&[1.0, 0.5]), &Mat::identity(2, 2), 0.2, &Vector::from_vec(vec![1.0, 1.0]), 3).unwrap();
        let cl = ComplexGaussianLaw::from_real(&law);
        assert!(desideratum_check(&cl, &law));
        let mut bad = cl.clone();
        bad.gamma[(0, 1)] += Complex64::new(1e-4, 0.0);
        assert!(!desideratum_check(&bad, &law));
    }

    #[test]
    fn real_part_of_complex_law() {
        let law = GaussianLaw { mean: Vector::from_vec(vec![1.0]), cov: Mat::from_element(1, 1, 2.0) };
        let cl = ComplexGaussianLaw::from_real(&law);
        assert_eq!(cl.real_part(), law);
        assert_eq!(cl.imaginary_cov()[(0, 0)], 0.0);
    }
}
