//! SDE proxies of SGD as drift and diffusion fields.
//!
//! | model  | drift `b(x)`                         | diffusion-square `𝒟(x)`   |
//! |--------|--------------------------------------|---------------------------|
//! | SME-1  | `−∇f`                                | `ηΣ`                      |
//! | SME-2  | `−∇f − (η/2)∇²f∇f`                   | `ηΣ`                      |
//! | SPF    | `U log(I−ηΛ)/(ηΛ) Uᵀ∇f`              | `ηΣ`                      |
//! | HA-SME | same as SPF                          | `U S Uᵀ`, `S_ij = ηΣ̃_ij a(ηλ_i, ηλ_j)` |
//!
//! with `∇²f = UΛUᵀ`, `Σ̃ = UᵀΣU` and `a(x, y) = log((1−x)(1−y))/(xy − x − y)`.

use crate::coefficients::{a_generating, log1p_ratio};
use crate::linalg::{
    eig_sym, lanczos_fn, max_abs, psd_sqrt, symmetrize, to_complex, CMat, CVector, EigenDecomposition,
    LinalgError, Mat, Vector,
};
use crate::problems::{NoiseModel, Objective};
use crate::quadratic_analytics::{
    bar_eta, commutes, complex_match_d, hasme_exponents, match_cov_min_eigenvalue, ComplexOu, QuadraticError,
};
use num_complex::Complex64;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

const SINGULAR_TOL: f64 = 1e-14;
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxyError {
    #[error("step size is singular: ηλ = 1 for eigenvalue {eigenvalue}")]
    SingularStepsize { eigenvalue: f64 },
    #[error("model is not well posed: {0}")]
    NotWellPosed(String),
    #[error("complex mode requires a quadratic objective with constant noise covariance")]
    RequiresQuadratic,
    #[error("the Krylov evaluator requires isotropic noise")]
    RequiresIsotropic,
    #[error("no complex OU process matches SGD (target min eigenvalue {min_eigenvalue:e})")]
    Unmatchable { min_eigenvalue: f64 },
    #[error("noise covariance is not diagonal in the Hessian eigenbasis (off-diagonal {0:e})")]
    NonCommuting(f64),
    #[error("operation not available in {0} mode")]
    WrongMode(Mode),
    #[error("dimension mismatch: objective {objective}, noise {noise}")]
    DimensionMismatch { objective: usize, noise: usize },
    #[error("step size must be nonnegative and finite, got {0}")]
    BadStepsize(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl From<QuadraticError> for ProxyError {
    fn from(e: QuadraticError) -> Self {
        match e {
            QuadraticError::SingularStepsize { eigenvalue } => ProxyError::SingularStepsize { eigenvalue },
            QuadraticError::Unmatchable { min_eigenvalue } => ProxyError::Unmatchable { min_eigenvalue },
            QuadraticError::Linalg(l) => ProxyError::Linalg(l),
            other => ProxyError::NotWellPosed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProxyKind {
    Sme1,
    Sme2,
    Spf,
    HaSme,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 4] = [ProxyKind::Sme1, ProxyKind::Sme2, ProxyKind::Spf, ProxyKind::HaSme];

    pub fn name(self) -> &'static str {
        match self {
            ProxyKind::Sme1 => "sme1",
            ProxyKind::Sme2 => "sme2",
            ProxyKind::Spf => "spf",
            ProxyKind::HaSme => "hasme",
        }
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Real,
    Complex,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Real => "real",
            Mode::Complex => "complex",
        })
    }
}

/// How Hessian functions are applied.
///
/// `Eigen` decomposes the Hessian at every evaluation. `Krylov` applies
/// `φ(∇²f)` to a vector by Lanczos iteration on Hessian-vector products and
/// only supports isotropic noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evaluator {
    Eigen,
    Krylov { tol: f64, max_iter: usize },
}

impl Evaluator {
    pub const KRYLOV_DEFAULT: Evaluator = Evaluator::Krylov { tol: 1e-10, max_iter: 120 };
}

#[derive(Clone)]
enum Dynamics {
    Real { obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, evaluator: Evaluator },
    Complex { ou: ComplexOu, b: CMat },
}

/// An SDE `dX = b(X)dt + D(X)dW` approximating SGD with step size `η`.
#[derive(Clone)]
pub struct SdeModel {
    pub kind: ProxyKind,
    pub eta: f64,
    pub mode: Mode,
    dim: usize,
    dynamics: Dynamics,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("kind", &self.kind)
            .field("eta", &self.eta)
            .field("mode", &self.mode)
            .field("dim", &self.dim)
            .finish()
    }
}

impl SdeModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evaluator(&self) -> Option<Evaluator> {
        match &self.dynamics {
            Dynamics::Real { evaluator, .. } => Some(*evaluator),
            Dynamics::Complex { .. } => None,
        }
    }

    /// Switches the Hessian-function evaluator of a real-mode model.
    pub fn with_evaluator(mut self, new: Evaluator) -> Result<Self, ProxyError> {
        match &mut self.dynamics {
            Dynamics::Real { noise, evaluator, .. } => {
                if matches!(new, Evaluator::Krylov { .. }) && self.kind == ProxyKind::HaSme && noise.isotropic_variance().is_none() {
                    return Err(ProxyError::RequiresIsotropic);
                }
                *evaluator = new;
                Ok(self)
            }
            Dynamics::Complex { .. } => Err(ProxyError::WrongMode(Mode::Complex)),
        }
    }

    pub fn complex_ou(&self) -> Option<&ComplexOu> {
        match &self.dynamics {
            Dynamics::Complex { ou, .. } => Some(ou),
            Dynamics::Real { .. } => None,
        }
    }

    /// `B` with `b(z) = Bz` in complex mode.
    pub fn complex_drift_matrix(&self) -> Option<&CMat> {
        match &self.dynamics {
            Dynamics::Complex { b, .. } => Some(b),
            Dynamics::Real { .. } => None,
        }
    }

    fn real_parts(&self) -> Result<(&dyn Objective, &dyn NoiseModel, Evaluator), ProxyError> {
        match &self.dynamics {
            Dynamics::Real { obj, noise, evaluator } => Ok((obj.as_ref(), noise.as_ref(), *evaluator)),
            Dynamics::Complex { .. } => Err(ProxyError::WrongMode(Mode::Complex)),
        }
    }

    pub fn drift(&self, x: &Vector) -> Result<Vector, ProxyError> {
        let (obj, _, evaluator) = self.real_parts()?;
        match self.kind {
            ProxyKind::Sme1 => Ok(-obj.gradient(x)),
            ProxyKind::Sme2 => Ok(sme2_drift(obj, x, self.eta)),
            ProxyKind::Spf | ProxyKind::HaSme => match evaluator {
                Evaluator::Eigen => {
                    let h = eig_sym(&obj.hessian(x))?;
                    real_flow_drift(&h, &obj.gradient(x), self.eta)
                }
                Evaluator::Krylov { tol, max_iter } => {
                    krylov_flow_drift(&*obj.hessian_operator(x), &obj.gradient(x), self.eta, tol, max_iter)
                }
            },
        }
    }

    pub fn drift_complex(&self, z: &CVector) -> Result<CVector, ProxyError> {
        match &self.dynamics {
            Dynamics::Complex { b, .. } => Ok(b * z),
            Dynamics::Real { .. } => Err(ProxyError::WrongMode(Mode::Real)),
        }
    }

    pub fn diffusion_sq(&self, x: &Vector) -> Result<Mat, ProxyError> {
        let (obj, noise, _) = self.real_parts()?;
        match self.kind {
            ProxyKind::HaSme => hasme_diffusion_sq(obj, noise, x, self.eta),
            _ => Ok(noise.covariance(x) * self.eta),
        }
    }

    /// Symmetric root of the diffusion-square in real mode.
    pub fn diffusion(&self, x: &Vector) -> Result<Mat, ProxyError> {
        let (obj, noise, _) = self.real_parts()?;
        match self.kind {
            ProxyKind::HaSme => {
                let h = eig_sym(&obj.hessian(x))?;
                hasme_root(&h, &noise.covariance(x), self.eta)
            }
            _ => Ok(noise.factor(x) * self.eta.sqrt()),
        }
    }

    /// Complex-mode diffusion matrix `D`.
    pub fn diffusion_complex(&self) -> Result<&CMat, ProxyError> {
        match &self.dynamics {
            Dynamics::Complex { ou, .. } => Ok(&ou.d),
            Dynamics::Real { .. } => Err(ProxyError::WrongMode(Mode::Real)),
        }
    }

    /// `(b(x), D(x)ζ)` for a standard normal `ζ`, sharing the Hessian work.
    pub fn step_terms(&self, x: &Vector, zeta: &Vector) -> Result<(Vector, Vector), ProxyError> {
        let (obj, noise, evaluator) = self.real_parts()?;
        let eta = self.eta;
        match self.kind {
            ProxyKind::Sme1 => Ok((-obj.gradient(x), noise.transform(x, zeta) * eta.sqrt())),
            ProxyKind::Sme2 => Ok((sme2_drift(obj, x, eta), noise.transform(x, zeta) * eta.sqrt())),
            ProxyKind::Spf => Ok((self.drift(x)?, noise.transform(x, zeta) * eta.sqrt())),
            ProxyKind::HaSme => match evaluator {
                Evaluator::Eigen => {
                    let h = eig_sym(&obj.hessian(x))?;
                    let b = real_flow_drift(&h, &obj.gradient(x), eta)?;
                    let d = hasme_root(&h, &noise.covariance(x), eta)?;
                    Ok((b, d * zeta))
                }
                Evaluator::Krylov { tol, max_iter } => {
                    let sigma2 = noise.isotropic_variance().ok_or(ProxyError::RequiresIsotropic)?;
                    let op = obj.hessian_operator(x);
                    let b = krylov_flow_drift(&*op, &obj.gradient(x), eta, tol, max_iter)?;
                    let scale = (eta * sigma2).sqrt();
                    let noise_term = if scale == 0.0 {
                        Vector::zeros(zeta.len())
                    } else {
                        let r = lanczos_fn(&*op, zeta, |l| (eta * l < 1.0).then(|| a_generating(eta * l, eta * l).sqrt()), tol, max_iter)
                            .map_err(|e| krylov_domain_error(e, eta))?;
                        r.value * scale
                    };
                    Ok((b, noise_term))
                }
            },
        }
    }
}

fn krylov_domain_error(e: LinalgError, eta: f64) -> ProxyError {
    match e {
        LinalgError::DomainError { eigenvalue } => {
            ProxyError::NotWellPosed(format!("Ritz value {eigenvalue} gives ηλ = {} ≥ 1", eta * eigenvalue))
        }
        other => other.into(),
    }
}

fn sme2_drift(obj: &dyn Objective, x: &Vector, eta: f64) -> Vector {
    let g = obj.gradient(x);
    let hg = if eta == 0.0 { Vector::zeros(g.len()) } else { obj.hvp(x, &g) };
    -(g + hg * (0.5 * eta))
}

/// `log(1 − z)/z` for real `z < 1`, continuous at `z = 0`.
pub fn flow_factor(z: f64) -> f64 {
    log1p_ratio(-z) * -1.0
}

fn real_flow_drift(h: &EigenDecomposition, grad: &Vector, eta: f64) -> Result<Vector, ProxyError> {
    check_real_domain(h, eta)?;
    let g = h.vectors.transpose() * grad;
    let scaled = Vector::from_iterator(g.len(), g.iter().zip(h.values.iter()).map(|(gi, &l)| gi * flow_factor(eta * l)));
    Ok(&h.vectors * scaled)
}

fn krylov_flow_drift(op: &dyn Fn(&Vector) -> Vector, g: &Vector, eta: f64, tol: f64, max_iter: usize) -> Result<Vector, ProxyError> {
    let r = lanczos_fn(op, g, |l| (eta * l < 1.0).then(|| flow_factor(eta * l)), tol, max_iter)
        .map_err(|e| krylov_domain_error(e, eta))?;
    Ok(r.value)
}

fn check_singular(h: &EigenDecomposition, eta: f64) -> Result<(), ProxyError> {
    for &l in h.values.iter() {
        if (1.0 - eta * l).abs() < SINGULAR_TOL {
            return Err(ProxyError::SingularStepsize { eigenvalue: l });
        }
    }
    Ok(())
}

fn check_real_domain(h: &EigenDecomposition, eta: f64) -> Result<(), ProxyError> {
    check_singular(h, eta)?;
    let top = h.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if eta * top > 1.0 {
        return Err(ProxyError::NotWellPosed(format!("η·λ_max = {} > 1 outside complex mode", eta * top)));
    }
    Ok(())
}

/// `b = U diag(log(1−ηλ_i)/(ηλ_i)) Uᵀ ∇f`; complex when some `ηλ_i > 1`.
pub fn hasme_drift(obj: &dyn Objective, x: &Vector, eta: f64) -> Result<CVector, ProxyError> {
    let h = eig_sym(&obj.hessian(x))?;
    check_singular(&h, eta)?;
    let g = h.vectors.transpose() * obj.gradient(x);
    let scaled = CVector::from_iterator(
        g.len(),
        g.iter().zip(h.values.iter()).map(|(&gi, &l)| {
            let z = eta * l;
            let factor = if z < 1.0 {
                Complex64::new(flow_factor(z), 0.0)
            } else {
                Complex64::new((z - 1.0).ln(), std::f64::consts::PI) / z
            };
            factor * gi
        }),
    );
    Ok(to_complex(&h.vectors) * scaled)
}

/// `S` in the Hessian eigenbasis.
fn hasme_s(h: &EigenDecomposition, sigma: &Mat, eta: f64) -> Result<Mat, ProxyError> {
    check_singular(h, eta)?;
    let st = h.to_eigenbasis(sigma);
    let z: Vec<f64> = h.values.iter().map(|l| eta * l).collect();
    let n = z.len();
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if st[(i, j)] == 0.0 {
                continue;
            }
            if (1.0 - z[i]) * (1.0 - z[j]) <= 0.0 {
                return Err(ProxyError::NotWellPosed(format!(
                    "modes with ηλ = {} and {} lie on opposite sides of 1",
                    z[i], z[j]
                )));
            }
            s[(i, j)] = eta * st[(i, j)] * a_generating(z[i], z[j]);
        }
    }
    Ok(symmetrize(&s))
}

fn hasme_root(h: &EigenDecomposition, sigma: &Mat, eta: f64) -> Result<Mat, ProxyError> {
    let s = hasme_s(h, sigma, eta)?;
    let tol = PSD_TOL * max_abs(&s).max(1.0);
    let root = psd_sqrt(&s, tol).map_err(|e| match e {
        LinalgError::NotPsd { min_eigenvalue } => {
            ProxyError::NotWellPosed(format!("HA-SME diffusion-square has eigenvalue {min_eigenvalue:e}"))
        }
        other => other.into(),
    })?;
    Ok(symmetrize(&h.from_eigenbasis(&root)))
}

pub fn hasme_diffusion_sq(obj: &dyn Objective, noise: &dyn NoiseModel, x: &Vector, eta: f64) -> Result<Mat, ProxyError> {
    let h = eig_sym(&obj.hessian(x))?;
    let s = hasme_s(&h, &noise.covariance(x), eta)?;
    Ok(symmetrize(&h.from_eigenbasis(&s)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExistenceReport {
    pub commuting: bool,
    pub psd: bool,
    /// Step-size bound below which the diffusion-square is guaranteed PSD.
    pub eta_threshold: f64,
    /// Smallest eigenvalue of the real diffusion-square, `NaN` when undefined.
    pub min_eigenvalue: f64,
    /// Some `ηλ_i ≥ 1`: the real drift does not exist.
    pub complex_required: bool,
    /// Smallest eigenvalue of the complex covariance-matching target, for
    /// quadratics with constant noise.
    pub matchability_min_eigenvalue: Option<f64>,
}

impl ExistenceReport {
    /// Real-mode HA-SME is well defined at this point.
    pub fn passes(&self) -> bool {
        self.psd && !self.complex_required
    }
}

pub fn hasme_existence_check(obj: &dyn Objective, noise: &dyn NoiseModel, x: &Vector, eta: f64) -> Result<ExistenceReport, ProxyError> {
    let hess = obj.hessian(x);
    let sigma = noise.covariance(x);
    let h = eig_sym(&hess)?;
    let commuting = commutes(&hess, &sigma);
    let eta_threshold = bar_eta(&hess, &sigma).map_err(ProxyError::from)?;
    let complex_required = h.values.iter().any(|&l| eta * l >= 1.0);
    let min_eigenvalue = match hasme_s(&h, &sigma, eta) {
        Ok(s) => eig_sym(&s)?.values.iter().copied().fold(f64::INFINITY, f64::min),
        Err(_) => f64::NAN,
    };
    let psd = min_eigenvalue >= -PSD_TOL * max_abs(&sigma).max(1.0) * eta.max(1.0);
    let matchability_min_eigenvalue = match (obj.as_quadratic(), noise.constant_covariance()) {
        (Some(a), Some(c)) => match_cov_min_eigenvalue(a, c, eta).ok(),
        _ => None,
    };
    Ok(ExistenceReport { commuting, psd, eta_threshold, min_eigenvalue, complex_required, matchability_min_eigenvalue })
}

/// `D = U diag(√(η σ̃_i log((1−ηλ_i)²)/((1−ηλ_i)² − 1))) Uᵀ` for `Σ` diagonal in
/// the Hessian eigenbasis. Each factor is nonnegative for every `ηλ_i ≠ 1`.
pub fn commuting_diffusion(h: &EigenDecomposition, sigma_tilde: &Mat, eta: f64) -> Result<Mat, ProxyError> {
    check_singular(h, eta)?;
    let n = h.dim();
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .fold(0.0f64, |acc, (i, j)| acc.max(sigma_tilde[(i, j)].abs()));
    if off > 1e-10 * max_abs(sigma_tilde).max(f64::MIN_POSITIVE) {
        return Err(ProxyError::NonCommuting(off));
    }
    let factors: Vec<f64> = (0..n)
        .map(|i| {
            let z = eta * h.values[i];
            (eta * sigma_tilde[(i, i)].max(0.0) * a_generating(z, z)).sqrt()
        })
        .collect();
    let mut scaled = h.vectors.clone();
    for (j, f) in factors.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*f);
    }
    Ok(symmetrize(&(scaled * h.vectors.transpose())))
}

fn validate(obj: &Arc<dyn Objective>, noise: &Arc<dyn NoiseModel>, eta: f64) -> Result<usize, ProxyError> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ProxyError::BadStepsize(eta));
    }
    if obj.dim() != noise.dim() {
        return Err(ProxyError::DimensionMismatch { objective: obj.dim(), noise: noise.dim() });
    }
    Ok(obj.dim())
}

fn real_model(kind: ProxyKind, obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, eta: f64) -> Result<SdeModel, ProxyError> {
    let dim = validate(&obj, &noise, eta)?;
    Ok(SdeModel { kind, eta, mode: Mode::Real, dim, dynamics: Dynamics::Real { obj, noise, evaluator: Evaluator::Eigen } })
}

pub fn build_sme1(obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, eta: f64) -> Result<SdeModel, ProxyError> {
    real_model(ProxyKind::Sme1, obj, noise, eta)
}

pub fn build_sme2(obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, eta: f64) -> Result<SdeModel, ProxyError> {
    real_model(ProxyKind::Sme2, obj, noise, eta)
}

fn quadratic_parts(obj: &Arc<dyn Objective>, noise: &Arc<dyn NoiseModel>) -> Result<(Mat, Mat), ProxyError> {
    match (obj.as_quadratic(), noise.constant_covariance()) {
        (Some(a), Some(s)) => Ok((a.clone(), s.clone())),
        _ => Err(ProxyError::RequiresQuadratic),
    }
}

fn complex_model(kind: ProxyKind, eta: f64, u: Mat, s: Vec<Complex64>, d: CMat) -> SdeModel {
    let ou = ComplexOu { u, s, d };
    let b = ou.b();
    SdeModel { kind, eta, mode: Mode::Complex, dim: ou.dim(), dynamics: Dynamics::Complex { ou, b } }
}

pub fn build_spf(obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, eta: f64, mode: Mode) -> Result<SdeModel, ProxyError> {
    match mode {
        Mode::Real => real_model(ProxyKind::Spf, obj, noise, eta),
        Mode::Complex => {
            validate(&obj, &noise, eta)?;
            let (a, sigma) = quadratic_parts(&obj, &noise)?;
            let (dec, s) = hasme_exponents(&a, eta)?;
            let root = psd_sqrt(&sigma, crate::linalg::default_psd_tol(&sigma))?;
            Ok(complex_model(ProxyKind::Spf, eta, dec.vectors, s, to_complex(&root) * Complex64::new(eta.sqrt(), 0.0)))
        }
    }
}

/// HA-SME. Real mode requires [`hasme_existence_check`] to pass at `x0`;
/// complex mode requires a quadratic objective with constant noise.
pub fn build_hasme(
    obj: Arc<dyn Objective>,
    noise: Arc<dyn NoiseModel>,
    eta: f64,
    mode: Mode,
    x0: &Vector,
) -> Result<SdeModel, ProxyError> {
    validate(&obj, &noise, eta)?;
    match mode {
        Mode::Real => {
            let report = hasme_existence_check(obj.as_ref(), noise.as_ref(), x0, eta)?;
            if !report.passes() {
                if report.complex_required {
                    let h = eig_sym(&obj.hessian(x0))?;
                    check_singular(&h, eta)?;
                }
                return Err(ProxyError::NotWellPosed(format!(
                    "existence check failed at x0: psd = {}, min eigenvalue {:e}, complex required = {}",
                    report.psd, report.min_eigenvalue, report.complex_required
                )));
            }
            real_model(ProxyKind::HaSme, obj, noise, eta)
        }
        Mode::Complex => {
            let (a, sigma) = quadratic_parts(&obj, &noise)?;
            let d = complex_match_d(&a, &sigma, eta)?;
            let (dec, s) = hasme_exponents(&a, eta)?;
            Ok(complex_model(ProxyKind::HaSme, eta, dec.vectors, s, d))
        }
    }
}

pub fn build(
    kind: ProxyKind,
    obj: Arc<dyn Objective>,
    noise: Arc<dyn NoiseModel>,
    eta: f64,
    mode: Mode,
    x0: &Vector,
) -> Result<SdeModel, ProxyError> {
    match (kind, mode) {
        (ProxyKind::Sme1, Mode::Real) => build_sme1(obj, noise, eta),
        (ProxyKind::Sme2, Mode::Real) => build_sme2(obj, noise, eta),
        (ProxyKind::Sme1 | ProxyKind::Sme2, Mode::Complex) => Err(ProxyError::WrongMode(Mode::Complex)),
        (ProxyKind::Spf, _) => build_spf(obj, noise, eta, mode),
        (ProxyKind::HaSme, _) => build_hasme(obj, noise, eta, mode, x0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{truncated_diffusion_sq, truncated_drift};
    use crate::problems::{make_isotropic_noise, ConstantNoise, CosineCoupled, QuadraticObjective};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad(eigs: &[f64]) -> Arc<dyn Objective> {
        Arc::new(QuadraticObjective::diagonal(eigs))
    }

    fn iso(dim: usize, s2: f64) -> Arc<dyn NoiseModel> {
        Arc::new(make_isotropic_noise(dim, s2).unwrap())
    }

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Mat {
        let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        eig_sym(&(&b + b.transpose())).unwrap().vectors
    }

    #[test]
    fn sme_examples() {
        let m = build_sme1(quad(&[1.0, 1.0]), iso(2, 4.0), 0.25).unwrap();
        assert_eq!(m.drift(&v(&[1.0, 1.0])).unwrap(), v(&[-1.0, -1.0]));
        assert!(max_abs(&(m.diffusion(&v(&[0.0, 0.0])).unwrap() - Mat::identity(2, 2))) < 1e-15);
        let m2 = build_sme2(quad(&[1.0]), iso(1, 1.0), 2.1).unwrap();
        assert!((m2.drift(&v(&[1.0])).unwrap()[0] + 2.05).abs() < 1e-14);
        let flat = build_sme2(quad(&[0.0, 0.0]), iso(2, 1.0), 0.5).unwrap();
        let sme1 = build_sme1(quad(&[0.0, 0.0]), iso(2, 1.0), 0.5).unwrap();
        let x = v(&[0.3, -0.2]);
        assert_eq!(flat.drift(&x).unwrap(), sme1.drift(&x).unwrap());
    }

    #[test]
    fn sme2_drift_matrix_on_quadratic() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -0.5]);
        let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(a.clone()).unwrap());
        let m = build_sme2(obj, iso(2, 1.0), 0.4).unwrap();
        let x = v(&[0.7, -1.1]);
        let expected = -(&a + &a * &a * 0.2) * &x;
        assert!((m.drift(&x).unwrap() - expected).amax() < 1e-14);
    }

    #[test]
    fn zero_step_sme2_is_sme1() {
        let obj: Arc<dyn Objective> = Arc::new(CosineCoupled::default());
        let x = v(&[0.4, 0.9]);
        let a = build_sme1(obj.clone(), iso(2, 1.0), 0.0).unwrap();
        let b = build_sme2(obj, iso(2, 1.0), 0.0).unwrap();
        assert_eq!(a.drift(&x).unwrap(), b.drift(&x).unwrap());
        assert_eq!(max_abs(&b.diffusion_sq(&x).unwrap()), 0.0);
    }

    #[test]
    fn hasme_drift_examples() {
        let obj = quad(&[1.0]);
        let b = hasme_drift(obj.as_ref(), &v(&[1.0]), 0.5).unwrap();
        assert!((b[0].re + 2f64.ln() / 0.5).abs() < 1e-14);
        assert_eq!(b[0].im, 0.0);
        let series = truncated_drift(obj.as_ref(), &v(&[1.0]), 0.5, 40);
        assert!((series[0] - b[0].re).abs() < 1e-12);

        let flat = hasme_drift(quad(&[0.0, 0.0]).as_ref(), &v(&[0.0, 0.0]), 0.3).unwrap();
        assert!(flat.iter().all(|z| z.norm() == 0.0));

        // per-step mean factor at ηλ = 2 is exactly −1
        let eta = 2.0;
        let b = hasme_drift(obj.as_ref(), &v(&[1.0]), eta).unwrap();
        let factor = (b[0] * eta).exp();
        assert!((factor - Complex64::new(-1.0, 0.0)).norm() < 1e-14);
        assert!(matches!(hasme_drift(obj.as_ref(), &v(&[1.0]), 1.0), Err(ProxyError::SingularStepsize { .. })));
    }

    #[test]
    fn spf_and_hasme_share_drift() {
        let obj: Arc<dyn Objective> = Arc::new(CosineCoupled::default());
        let noise = iso(2, 0.5);
        let x = v(&[0.2, -0.4]);
        let spf = build_spf(obj.clone(), noise.clone(), 0.3, Mode::Real).unwrap();
        let ha = build_hasme(obj.clone(), noise, 0.3, Mode::Real, &x).unwrap();
        let d1 = spf.drift(&x).unwrap();
        assert_eq!(d1, ha.drift(&x).unwrap());
        let dz = hasme_drift(obj.as_ref(), &x, 0.3).unwrap();
        assert!((d1 - dz.map(|z| z.re)).amax() < 1e-15);
    }

    #[test]
    fn diffusion_sq_examples() {
        let x = v(&[0.0, 0.0]);
        let d = hasme_diffusion_sq(quad(&[0.0, 0.0]).as_ref(), &ConstantNoise::new(Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap(), &x, 0.2).unwrap();
        assert!(max_abs(&(d - Mat::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2]))) < 1e-15);

        for (lambda, eta, s2) in [(1.0, 0.5, 1.0), (-1.0, 0.3, 2.0), (0.7, 0.9, 0.5)] {
            let d = hasme_diffusion_sq(quad(&[lambda]).as_ref(), &make_isotropic_noise(1, s2).unwrap(), &v(&[0.0]), eta).unwrap();
            let closed = s2 * ((1.0 - eta * lambda) * (1.0 - eta * lambda)).ln() / (eta * lambda * lambda - 2.0 * lambda);
            assert!((d[(0, 0)] - closed).abs() < 1e-14 * closed.abs());
            assert!(d[(0, 0)] > 0.0);
        }
    }

    #[test]
    fn diffusion_matches_series_in_commuting_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_orthogonal(2, &mut rng);
        let eta = 0.4;
        let a = &u * Mat::from_diagonal(&v(&[1.0, -0.6])) * u.transpose();
        let sigma = &u * Mat::from_diagonal(&v(&[1.5, 0.2])) * u.transpose();
        let obj = QuadraticObjective::new(a).unwrap();
        let noise = ConstantNoise::new(sigma).unwrap();
        let x = v(&[0.0, 0.0]);
        let closed = hasme_diffusion_sq(&obj, &noise, &x, eta).unwrap();
        let series = truncated_diffusion_sq(&obj, &noise, &x, eta, 40);
        assert!(max_abs(&(closed - series)) < 1e-8);
    }

    #[test]
    fn commuting_diffusion_agrees_with_s_route() {
        let h = eig_sym(&Mat::from_diagonal(&v(&[1.0, 0.0, -2.0]))).unwrap();
        let sigma = Mat::from_diagonal(&v(&[0.5, 1.0, 2.0]));
        let eta = 0.1;
        let d = commuting_diffusion(&h, &h.to_eigenbasis(&sigma), eta).unwrap();
        let obj = QuadraticObjective::diagonal(&[1.0, 0.0, -2.0]);
        let noise = ConstantNoise::new(sigma).unwrap();
        let dsq = hasme_diffusion_sq(&obj, &noise, &v(&[0.0, 0.0, 0.0]), eta).unwrap();
        assert!(max_abs(&(&d * d.transpose() - dsq)) < 1e-12);
        // λ = 0 mode: √(ησ²)
        let zero = eig_sym(&Mat::from_element(1, 1, 0.0)).unwrap();
        let d0 = commuting_diffusion(&zero, &Mat::from_element(1, 1, 2.0), 0.5).unwrap();
        assert!((d0[(0, 0)] - 1.0).abs() < 1e-15);
        // positive on both sides of ηλ = 1, including ηλ = 0.5 and 2
        for z in [0.5, 1.5, 2.0, 3.0] {
            let h1 = eig_sym(&Mat::from_element(1, 1, z)).unwrap();
            let d1 = commuting_diffusion(&h1, &Mat::from_element(1, 1, 1.0), 1.0).unwrap();
            assert!(d1[(0, 0)] > 0.0);
        }
        let nc = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let h2 = eig_sym(&Mat::from_diagonal(&v(&[1.0, 2.0]))).unwrap();
        assert!(matches!(commuting_diffusion(&h2, &nc, 0.1), Err(ProxyError::NonCommuting(_))));
    }

    #[test]
    fn existence_check_examples() {
        let x = v(&[0.0, 0.0]);
        let obj = QuadraticObjective::new(Mat::from_row_slice(2, 2, &[0.3, 0.8, 0.8, -1.0])).unwrap();
        let r = hasme_existence_check(&obj, &make_isotropic_noise(2, 1.0).unwrap(), &x, 0.1).unwrap();
        assert!(r.commuting && r.psd && r.passes());

        let obj = QuadraticObjective::diagonal(&[1.0, -0.5]);
        let r = hasme_existence_check(&obj, &make_isotropic_noise(2, 1.0).unwrap(), &x, 0.1).unwrap();
        assert!((r.eta_threshold - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);

        let hard = QuadraticObjective::diagonal(&[1.0, -1.0]);
        let noise = ConstantNoise::new(Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])).unwrap();
        let r = hasme_existence_check(&hard, &noise, &x, 0.1).unwrap();
        assert!(!r.psd);
        assert!(r.matchability_min_eigenvalue.unwrap() < -1e-6);
        assert!(!r.passes());
    }

    #[test]
    fn build_hasme_modes() {
        let x0 = v(&[1.0, 1.0]);
        let m = build_hasme(quad(&[1.0, -1.0]), iso(2, 1.0), 2.1, Mode::Complex, &x0).unwrap();
        assert_eq!(m.mode, Mode::Complex);
        let factors: Vec<Complex64> = m.complex_ou().unwrap().s.iter().map(|s| (s * 2.1).exp()).collect();
        let mut re: Vec<f64> = factors.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 1.1).abs() < 1e-12 && (re[1] - 3.1).abs() < 1e-12);
        assert!(factors.iter().all(|z| z.im.abs() < 1e-12));

        assert!(matches!(
            build_hasme(quad(&[1.0, -1.0]), iso(2, 1.0), 2.1, Mode::Real, &x0),
            Err(ProxyError::NotWellPosed(_))
        ));
        let cos: Arc<dyn Objective> = Arc::new(CosineCoupled::default());
        assert!(matches!(build_hasme(cos, iso(2, 1.0), 0.1, Mode::Complex, &x0), Err(ProxyError::RequiresQuadratic)));
        let hard_noise: Arc<dyn NoiseModel> = Arc::new(ConstantNoise::new(Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])).unwrap());
        assert!(matches!(
            build_hasme(quad(&[1.0, -1.0]), hard_noise, 0.5, Mode::Complex, &x0),
            Err(ProxyError::Unmatchable { .. })
        ));
    }

    #[test]
    fn complex_mode_d_satisfies_both_targets() {
        let eta = 0.3;
        let m = build_hasme(quad(&[1.0, 2.0]), Arc::new(ConstantNoise::new(Mat::from_diagonal(&v(&[3.0, 4.0]))).unwrap()), eta, Mode::Complex, &v(&[0.0, 0.0])).unwrap();
        let ou = m.complex_ou().unwrap();
        let ud = to_complex(&ou.u).transpose() * &ou.d;
        let a = Mat::from_diagonal(&v(&[1.0, 2.0]));
        let s = Mat::from_diagonal(&v(&[3.0, 4.0]));
        let cov = crate::quadratic_analytics::match_cov_target(&a, &s, eta).unwrap();
        let pc = crate::quadratic_analytics::match_pseudo_target(&a, &s, eta).unwrap();
        assert!(crate::linalg::max_abs_c(&(&ud * ud.adjoint() - cov)) < 1e-8);
        assert!(crate::linalg::max_abs_c(&(&ud * ud.transpose() - pc)) < 1e-8);
    }

    #[test]
    fn small_step_hasme_is_sme1_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b + b.transpose();
        let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(a).unwrap());
        let noise = iso(3, 1.0);
        let x = v(&[0.5, -0.5, 1.0]);
        let eta = 1e-3;
        let ha = build_hasme(obj.clone(), noise.clone(), eta, Mode::Real, &x).unwrap();
        let sme2 = build_sme2(obj.clone(), noise.clone(), eta).unwrap();
        let sme1 = build_sme1(obj, noise, eta).unwrap();
        let dd = (ha.drift(&x).unwrap() - sme2.drift(&x).unwrap()).amax();
        assert!(dd < 10.0 * eta * eta);
        let ds = max_abs(&(ha.diffusion_sq(&x).unwrap() - sme1.diffusion_sq(&x).unwrap()));
        assert!(ds < 10.0 * eta * eta);
    }

    #[test]
    fn krylov_evaluator_matches_eigen() {
        let obj: Arc<dyn Objective> = Arc::new(CosineCoupled::default());
        let x = v(&[0.3, 0.6]);
        let m = build_hasme(obj, iso(2, 0.7), 0.2, Mode::Real, &x).unwrap();
        let k = m.clone().with_evaluator(Evaluator::KRYLOV_DEFAULT).unwrap();
        let zeta = v(&[0.4, -1.3]);
        let (b1, n1) = m.step_terms(&x, &zeta).unwrap();
        let (b2, n2) = k.step_terms(&x, &zeta).unwrap();
        assert!((b1 - b2).amax() < 1e-12);
        assert!((n1 - n2).amax() < 1e-12);
        let aniso: Arc<dyn NoiseModel> = Arc::new(ConstantNoise::new(Mat::from_diagonal(&v(&[1.0, 2.0]))).unwrap());
        let m2 = build_hasme(Arc::new(CosineCoupled::default()), aniso, 0.2, Mode::Real, &x).unwrap();
        assert!(matches!(m2.with_evaluator(Evaluator::KRYLOV_DEFAULT), Err(ProxyError::RequiresIsotropic)));
    }

    #[test]
    fn real_mode_refuses_large_curvature() {
        let m = build_spf(quad(&[1.0]), iso(1, 1.0), 0.5, Mode::Real).unwrap();
        assert!(m.drift(&v(&[1.0])).is_ok());
        let m = build_spf(quad(&[3.0]), iso(1, 1.0), 0.5, Mode::Real).unwrap();
        assert!(matches!(m.drift(&v(&[1.0])), Err(ProxyError::NotWellPosed(_))));
    }

    #[test]
    fn sgd_mean_exactness_in_both_modes() {
        // exp(kη B) x0 = (I − ηA)^k x0
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let u = random_orthogonal(3, &mut rng);
            let eta = 0.5;
            let lams: Vec<f64> = (0..3)
                .map(|_| loop {
                    let z: f64 = rng.gen_range(-3.0..3.0);
                    if (z - 1.0).abs() > 0.05 {
                        break z / eta;
                    }
                })
                .collect();
            let a = symmetrize(&(&u * Mat::from_diagonal(&v(&lams)) * u.transpose()));
            let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(a.clone()).unwrap());
            let x0 = v(&[1.0, -0.5, 0.25]);
            let m = build_spf(obj, iso(3, 1.0), eta, Mode::Complex).unwrap();
            let k = 4;
            let prop = m.complex_ou().unwrap().propagator(k as f64 * eta) * x0.map(|x| Complex64::new(x, 0.0));
            let mut sgd = x0.clone();
            for _ in 0..k {
                sgd = &sgd - &a * &sgd * eta;
            }
            let err = (prop.map(|z| z.re) - &sgd).amax().max(prop.iter().map(|z| z.im.abs()).fold(0.0, f64::max));
            assert!(err <= 1e-9 * sgd.amax().max(1.0), "{err}");
        }
    }

    #[test]
    fn real_drift_generates_gd_on_quadratic() {
        let a = Mat::from_row_slice(2, 2, &[0.8, 0.2, 0.2, -0.4]);
        let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(a.clone()).unwrap());
        let eta = 0.5;
        let m = build_spf(obj, iso(2, 1.0), eta, Mode::Real).unwrap();
        let cols: Vec<Vector> = (0..2).map(|i| m.drift(&Vector::from_fn(2, |r, _| if r == i { 1.0 } else { 0.0 })).unwrap()).collect();
        let b = Mat::from_columns(&cols);
        let expb = (b * (3.0 * eta)).exp();
        let g = Mat::identity(2, 2) - &a * eta;
        assert!(max_abs(&(expb - &g * &g * &g)) < 1e-9);
    }

    fn random_instance(rng: &mut ChaCha8Rng, commuting: bool) -> (QuadraticObjective, ConstantNoise, f64) {
        let n = rng.gen_range(1..=4);
        let u = random_orthogonal(n, rng);
        let lams: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = symmetrize(&(&u * Mat::from_diagonal(&v(&lams)) * u.transpose()));
        let sigma = if commuting {
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            &u * Mat::from_diagonal(&v(&s)) * u.transpose()
        } else {
            let c = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            &c * c.transpose()
        };
        let lmax = lams.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let eta = rng.gen_range(0.01..0.5) / lmax.max(1e-3);
        (QuadraticObjective::new(a).unwrap(), ConstantNoise::new(symmetrize(&sigma)).unwrap(), eta)
    }

    #[test]
    fn series_converges_to_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..200 {
            let (obj, noise, eta) = random_instance(&mut rng, trial % 2 == 0);
            let x = Vector::from_fn(obj.dim(), |_, _| rng.gen_range(-1.0..1.0));
            let drift = hasme_drift(&obj, &x, eta).unwrap().map(|z| z.re);
            let diff = hasme_diffusion_sq(&obj, &noise, &x, eta).unwrap();
            assert!((truncated_drift(&obj, &x, eta, 40) - drift).amax() <= 1e-7);
            assert!(max_abs(&(truncated_diffusion_sq(&obj, &noise, &x, eta, 40) - diff)) <= 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn diffusion_square_is_symmetric(seed in 0u64..10_000, x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let noise = ConstantNoise::new(symmetrize(&(&c * c.transpose()))).unwrap();
            let obj = CosineCoupled::default();
            let d = hasme_diffusion_sq(&obj, &noise, &v(&[x, y]), 0.2).unwrap();
            prop_assert!(crate::linalg::asymmetry(&d) <= 1e-12);
        }

        #[test]
        fn real_root_squares_to_diffusion(seed in 0u64..10_000, x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s2 = rng.gen_range(0.0..3.0);
            let obj: Arc<dyn Objective> = Arc::new(CosineCoupled::default());
            let m = build_hasme(obj, iso(2, s2), 0.25, Mode::Real, &v(&[0.0, 0.0])).unwrap();
            let p = v(&[x, y]);
            let d = m.diffusion(&p).unwrap();
            prop_assert!(max_abs(&(&d * d.transpose() - m.diffusion_sq(&p).unwrap())) <= 1e-8);
        }
    }
}
