//! Dense real/complex matrix kernels.
//!
//! Everything above this module works in a Hessian eigenbasis, so the central
//! routine is a cyclic Jacobi eigensolver for symmetric matrices. Complex
//! Hermitian problems are mapped onto real symmetric ones through the embedding
//! `M = X + iY  ->  [[X, -Y], [Y, X]]`, which preserves products, adjoints and
//! positive semi-definiteness.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
/// Complex matrix. `.adjoint()` is the conjugate transpose, `.transpose()` the plain one.
pub type CMat = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const MAX_SWEEPS: usize = 100;

/// Default orthogonality tolerance for eigenvector matrices.
pub const TOL_ORTH: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |A - A^T| = {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("Jacobi iteration did not converge within {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("logarithm of zero")]
    LogOfZero,
    #[error("function undefined at eigenvalue {eigenvalue}")]
    DomainError { eigenvalue: f64 },
}

/// Symmetric eigendecomposition `A = U diag(values) U^T`.
///
/// Eigenvalues are ascending; every eigenvector has its first non-negligible
/// component positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub vectors: Mat,
    pub values: Vector,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> Mat {
        self.map_real(|l| l)
    }

    /// `U diag(f(λ)) U^T` for a real-valued `f`.
    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        &scaled * self.vectors.transpose()
    }

    /// Largest eigenvalue magnitude, i.e. the spectral norm.
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// `U^T M U`.
    pub fn to_eigenbasis(&self, m: &Mat) -> Mat {
        self.vectors.transpose() * m * &self.vectors
    }

    /// `U M U^T`.
    pub fn from_eigenbasis(&self, m: &Mat) -> Mat {
        &self.vectors * m * self.vectors.transpose()
    }

    pub fn orthogonality_residual(&self) -> f64 {
        let n = self.dim();
        max_abs(&(self.vectors.transpose() * &self.vectors - Mat::identity(n, n)))
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_c(m: &CMat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.norm()))
}

pub fn asymmetry(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Cyclic Jacobi eigensolver.
pub fn eig_sym(a: &Mat) -> Result<EigenDecomposition, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare { rows: n, cols: a.ncols() });
    }
    let scale = max_abs(a);
    let asym = asymmetry(a);
    if asym > 1e-12 * scale {
        return Err(LinalgError::NonSymmetric { asymmetry: asym });
    }

    let mut m = symmetrize(a);
    let mut v = Mat::identity(n, n);
    let frob = m.norm();
    let target = (f64::EPSILON * frob).powi(2);

    let mut sweeps = 0;
    if n > 1 && frob > 0.0 {
        loop {
            let off = off_diagonal_sq(&m);
            if off <= target {
                break;
            }
            if sweeps == MAX_SWEEPS {
                return Err(LinalgError::NoConvergence { sweeps, off_norm: off.sqrt() });
            }
            sweeps += 1;
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let (app, aqq) = (m[(p, p)], m[(q, q)]);
                    // negligible after a few sweeps: drop it
                    if sweeps > 4 && 100.0 * apq.abs() <= f64::EPSILON * app.abs().min(aqq.abs()) {
                        m[(p, q)] = 0.0;
                        m[(q, p)] = 0.0;
                        continue;
                    }
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }

    Ok(sorted_decomposition(m.diagonal(), v))
}

fn off_diagonal_sq(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s
}

fn rotate(m: &mut Mat, v: &mut Mat, p: usize, q: usize) {
    let n = m.nrows();
    let apq = m[(p, q)];
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    m[(p, p)] -= t * apq;
    m[(q, q)] += t * apq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let g = m[(k, p)];
        let h = m[(k, q)];
        let new_kp = g - s * (h + g * tau);
        let new_kq = h + s * (g - h * tau);
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    for k in 0..n {
        let g = v[(k, p)];
        let h = v[(k, q)];
        v[(k, p)] = g - s * (h + g * tau);
        v[(k, q)] = h + s * (g - h * tau);
    }
}

fn sorted_decomposition(values: Vector, mut vectors: Mat) -> EigenDecomposition {
    let n = values.len();
    for j in 0..n {
        normalize_sign(vectors.column_mut(j));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[i].total_cmp(&values[j]).then_with(|| {
            let (ci, cj) = (vectors.column(i), vectors.column(j));
            ci.iter()
                .zip(cj.iter())
                .map(|(a, b)| b.total_cmp(a))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let sorted_values = Vector::from_iterator(n, order.iter().map(|&i| values[i]));
    let sorted_vectors = Mat::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    EigenDecomposition { vectors: sorted_vectors, values: sorted_values }
}

fn normalize_sign(mut col: nalgebra::DVectorViewMut<'_, f64>) {
    let first = col.iter().copied().find(|x| x.abs() > 1e-12);
    if let Some(x) = first {
        if x < 0.0 {
            col.neg_mut();
        }
    }
}

/// Clamping window used when the caller has no better tolerance.
pub fn default_psd_tol(m: &Mat) -> f64 {
    1e-10 * max_abs(m).max(f64::MIN_POSITIVE)
}

/// Principal (symmetric) square root of a PSD matrix.
///
/// Eigenvalues in `[-tol, 0)` are clamped to zero.
pub fn psd_sqrt(m: &Mat, tol: f64) -> Result<Mat, LinalgError> {
    let decomp = eig_sym(m)?;
    sqrt_from_decomposition(&decomp, tol)
}

pub fn sqrt_from_decomposition(decomp: &EigenDecomposition, tol: f64) -> Result<Mat, LinalgError> {
    let min = decomp.values.iter().copied().fold(f64::INFINITY, f64::min);
    if decomp.dim() > 0 && min < -tol {
        return Err(LinalgError::NotPsd { min_eigenvalue: min });
    }
    let root = decomp.map_real(|l| l.max(0.0).sqrt());
    Ok(symmetrize(&root))
}

/// Principal branch logarithm with `Im ∈ (-π, π]`.
pub fn complex_log(z: Complex64) -> Result<Complex64, LinalgError> {
    if z.re == 0.0 && z.im == 0.0 {
        return Err(LinalgError::LogOfZero);
    }
    let mut arg = z.im.atan2(z.re);
    if arg <= -std::f64::consts::PI {
        arg = std::f64::consts::PI;
    }
    Ok(Complex64::new(z.norm().ln(), arg))
}

/// `log(1 - z)` for real `z`, on the principal branch.
pub fn log_one_minus(z: f64) -> Result<Complex64, LinalgError> {
    if z < 1.0 {
        Ok(Complex64::new((-z).ln_1p(), 0.0))
    } else if z == 1.0 {
        Err(LinalgError::LogOfZero)
    } else {
        Ok(Complex64::new((z - 1.0).ln(), std::f64::consts::PI))
    }
}

/// `U diag(φ(λ_i)) U^T`.
pub fn eigen_fn(
    decomp: &EigenDecomposition,
    phi: impl Fn(f64) -> Option<Complex64>,
) -> Result<CMat, LinalgError> {
    let n = decomp.dim();
    let mut vals = Vec::with_capacity(n);
    for &l in decomp.values.iter() {
        vals.push(phi(l).ok_or(LinalgError::DomainError { eigenvalue: l })?);
    }
    let u = &decomp.vectors;
    Ok(CMat::from_fn(n, n, |i, j| {
        (0..n).fold(Complex64::new(0.0, 0.0), |acc, k| acc + vals[k] * (u[(i, k)] * u[(j, k)]))
    }))
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn real_part(m: &CMat) -> Mat {
    m.map(|z| z.re)
}

pub fn imag_part(m: &CMat) -> Mat {
    m.map(|z| z.im)
}

/// Real symmetric embedding `[[Re, -Im], [Im, Re]]` of a Hermitian matrix.
pub fn hermitian_embedding(m: &CMat) -> Mat {
    let n = m.nrows();
    Mat::from_fn(2 * n, 2 * n, |i, j| {
        let z = m[(i % n, j % n)];
        match (i < n, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

pub fn hermitian_asymmetry(m: &CMat) -> f64 {
    max_abs_c(&(m - m.adjoint()))
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Result<Vec<f64>, LinalgError> {
    let h = hermitian_embedding(&hermitian_part(m));
    let decomp = eig_sym(&h)?;
    // every eigenvalue of the embedding appears twice
    Ok(decomp.values.iter().step_by(2).copied().collect())
}

/// Principal square root of a Hermitian PSD matrix.
pub fn hermitian_psd_sqrt(m: &CMat, tol: f64) -> Result<CMat, LinalgError> {
    let n = m.nrows();
    let h = hermitian_embedding(&hermitian_part(m));
    let root = psd_sqrt(&h, tol)?;
    Ok(CMat::from_fn(n, n, |i, j| Complex64::new(root[(i, j)], root[(i + n, j)])))
}

fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// Output of [`lanczos_fn`].
#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub value: Vector,
    /// Extreme Ritz values of the last Krylov space.
    pub ritz_min: f64,
    pub ritz_max: f64,
    pub iterations: usize,
}

const LANCZOS_CHECK_EVERY: usize = 4;

/// Matrix-free `φ(H) v` for a symmetric operator `H`, by Lanczos with full
/// reorthogonalization. Stops when two successive estimates agree to `tol`
/// relative, on breakdown, or after `max_iter` steps.
pub fn lanczos_fn(
    op: &dyn Fn(&Vector) -> Vector,
    v: &Vector,
    phi: impl Fn(f64) -> Option<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LanczosResult, LinalgError> {
    let n = v.len();
    let norm = v.norm();
    if norm == 0.0 || n == 0 {
        return Ok(LanczosResult { value: Vector::zeros(n), ritz_min: 0.0, ritz_max: 0.0, iterations: 0 });
    }
    let max_iter = max_iter.clamp(1, n);
    let mut basis: Vec<Vector> = vec![v / norm];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut previous: Option<Vector> = None;
    loop {
        let j = alpha.len();
        let mut w = op(&basis[j]);
        let a = basis[j].dot(&w);
        alpha.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let b = w.norm();
        let m = alpha.len();
        let scale = alpha.iter().chain(&beta).fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
        let breakdown = b <= 1e-13 * scale;
        let done = breakdown || m >= max_iter;
        if done || m % LANCZOS_CHECK_EVERY == 0 {
            let (value, lo, hi) = krylov_apply(&basis[..m], &alpha, &beta, norm, &phi)?;
            let converged = previous
                .as_ref()
                .is_some_and(|p| (&value - p).norm() <= tol * value.norm().max(f64::MIN_POSITIVE));
            if done || converged {
                return Ok(LanczosResult { value, ritz_min: lo, ritz_max: hi, iterations: m });
            }
            previous = Some(value);
        }
        beta.push(b);
        basis.push(w / b);
    }
}

fn krylov_apply(
    basis: &[Vector],
    alpha: &[f64],
    beta: &[f64],
    norm: f64,
    phi: &impl Fn(f64) -> Option<f64>,
) -> Result<(Vector, f64, f64), LinalgError> {
    let m = alpha.len();
    let t = Mat::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut coeffs = vec![0.0; m];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..m {
        let theta = eig.eigenvalues[k];
        lo = lo.min(theta);
        hi = hi.max(theta);
        let f = phi(theta).ok_or(LinalgError::DomainError { eigenvalue: theta })?;
        let w = f * eig.eigenvectors[(0, k)];
        for i in 0..m {
            coeffs[i] += w * eig.eigenvectors[(i, k)];
        }
    }
    let mut value = Vector::zeros(basis[0].len());
    for (q, c) in basis.iter().zip(&coeffs) {
        value.axpy(norm * c, q, 1.0);
    }
    Ok((value, lo, hi))
}
