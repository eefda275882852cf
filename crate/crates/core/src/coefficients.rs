//! Exact power-series coefficients behind the HA-SME drift and diffusion.
//!
//! * `c_s`: `log(1 − x)/x = Σ c_s xˢ`, so `c_s = −1/(s+1)`.
//! * `a_{s,m}`: `log((1 − x)(1 − y))/(xy − x − y) = Σ a_{s,m} xˢ yᵐ`.
//! * `b_{s,m}`: the drift cross-term coefficients, antisymmetric off `(0,0)`.
//!
//! All tables are computed in exact rational arithmetic.

use crate::linalg::{Mat, Vector};
use crate::problems::{NoiseModel, Objective};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt::Write as _;
use std::sync::OnceLock;
use thiserror::Error;

pub type Rational = BigRational;

pub const MAX_A_ORDER: usize = 40;
pub const MAX_B_ORDER: usize = 20;
/// Order of the cached `a` table used by the truncated diffusion series.
const CACHED_ORDER: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("order {order} exceeds the supported maximum {max}")]
    OrderTooLarge { order: usize, max: usize },
    #[error("series division residual {residual:e} at order {order}")]
    PrecisionLoss { order: usize, residual: f64 },
    #[error("division by a series with zero constant term")]
    ZeroConstantTerm,
}

fn rat(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn c_coeff(s: usize) -> Rational {
    rat(-1, s as i64 + 1)
}

/// Truncated univariate power series `Σ_{k≤P} a_k xᵏ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series1D {
    coeffs: Vec<Rational>,
}

impl Series1D {
    pub fn from_coeffs(coeffs: Vec<Rational>) -> Self {
        assert!(!coeffs.is_empty(), "a series needs at least a constant term");
        Self { coeffs }
    }

    pub fn zero(order: usize) -> Self {
        Self { coeffs: vec![Rational::zero(); order + 1] }
    }

    pub fn one(order: usize) -> Self {
        let mut s = Self::zero(order);
        s.coeffs[0] = Rational::one();
        s
    }

    /// The series `x`.
    pub fn x(order: usize) -> Self {
        let mut s = Self::zero(order);
        if order >= 1 {
            s.coeffs[1] = Rational::one();
        }
        s
    }

    /// `log(1 − x) = −Σ_{k≥1} xᵏ/k`.
    pub fn log_one_minus(order: usize) -> Self {
        Self { coeffs: (0..=order).map(|k| if k == 0 { Rational::zero() } else { rat(-1, k as i64) }).collect() }
    }

    /// `log(1 − x)/x = Σ c_s xˢ`.
    pub fn c_series(order: usize) -> Self {
        Self { coeffs: (0..=order).map(c_coeff).collect() }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, k: usize) -> &Rational {
        &self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[Rational] {
        &self.coeffs
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(to_f64).collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.to_f64().iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.order().min(other.order());
        Self { coeffs: (0..=n).map(|k| &self.coeffs[k] + &other.coeffs[k]).collect() }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let n = self.order().min(other.order());
        Self { coeffs: (0..=n).map(|k| &self.coeffs[k] - &other.coeffs[k]).collect() }
    }

    pub fn scale(&self, c: &Rational) -> Self {
        Self { coeffs: self.coeffs.iter().map(|a| a * c).collect() }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.order().min(other.order());
        let mut out = vec![Rational::zero(); n + 1];
        for (i, a) in self.coeffs.iter().enumerate().take(n + 1) {
            if a.is_zero() {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate().take(n + 1 - i) {
                out[i + j] += a * b;
            }
        }
        Self { coeffs: out }
    }

    pub fn div(&self, other: &Self) -> Result<Self, CoefficientError> {
        let n = self.order().min(other.order());
        let b0 = &other.coeffs[0];
        if b0.is_zero() {
            return Err(CoefficientError::ZeroConstantTerm);
        }
        let mut q: Vec<Rational> = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut acc = self.coeffs[k].clone();
            for j in 1..=k {
                acc -= &other.coeffs[j] * &q[k - j];
            }
            q.push(acc / b0);
        }
        Ok(Self { coeffs: q })
    }

    pub fn pow(&self, n: usize) -> Self {
        let mut out = Self::one(self.order());
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// `log(1 − s(x))` for a series with zero constant term.
    pub fn log_one_minus_of(&self) -> Result<Self, CoefficientError> {
        if !self.coeffs[0].is_zero() {
            return Err(CoefficientError::ZeroConstantTerm);
        }
        let n = self.order();
        let mut out = Self::zero(n);
        let mut power = Self::one(n);
        for k in 1..=n {
            power = power.mul(self);
            out = out.sub(&power.scale(&rat(1, k as i64)));
        }
        Ok(out)
    }

    /// Square root of a series with constant term 1.
    pub fn sqrt(&self) -> Result<Self, CoefficientError> {
        if !self.coeffs[0].is_one() {
            return Err(CoefficientError::ZeroConstantTerm);
        }
        let n = self.order();
        let mut g: Vec<Rational> = vec![Rational::one()];
        for k in 1..=n {
            let mut acc = self.coeffs[k].clone();
            for j in 1..k {
                acc -= &g[j] * &g[k - j];
            }
            g.push(acc / rat(2, 1));
        }
        Ok(Self { coeffs: g })
    }
}

/// Bivariate series truncated at total degree `P`: `Σ_{s+m≤P} a_{s,m} xˢ yᵐ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series2D {
    order: usize,
    /// `rows[s][m]` for `m ≤ P − s`.
    rows: Vec<Vec<Rational>>,
}

impl Series2D {
    pub fn zero(order: usize) -> Self {
        Self { order, rows: (0..=order).map(|s| vec![Rational::zero(); order - s + 1]).collect() }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, s: usize, m: usize) -> &Rational {
        &self.rows[s][m]
    }

    pub fn set(&mut self, s: usize, m: usize, v: Rational) {
        self.rows[s][m] = v;
    }

    /// Embeds `p(x)` (as `p(x)·1`).
    pub fn from_x(p: &Series1D) -> Self {
        let mut out = Self::zero(p.order());
        for s in 0..=p.order() {
            out.rows[s][0] = p.coeffs[s].clone();
        }
        out
    }

    /// Embeds `p(y)`.
    pub fn from_y(p: &Series1D) -> Self {
        let mut out = Self::zero(p.order());
        for m in 0..=p.order() {
            out.rows[0][m] = p.coeffs[m].clone();
        }
        out
    }

    /// `s(x, 0)`.
    pub fn at_y_zero(&self) -> Series1D {
        Series1D { coeffs: (0..=self.order).map(|s| self.rows[s][0].clone()).collect() }
    }

    /// `s(0, y)`.
    pub fn at_x_zero(&self) -> Series1D {
        Series1D { coeffs: self.rows[0].clone() }
    }

    /// `s(z, z)`.
    pub fn diagonal(&self) -> Series1D {
        let mut out = Series1D::zero(self.order);
        for s in 0..=self.order {
            for m in 0..=(self.order - s) {
                out.coeffs[s + m] += &self.rows[s][m];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.order.min(other.order);
        let mut out = Self::zero(n);
        for s in 0..=n {
            for m in 0..=(n - s) {
                out.rows[s][m] = &self.rows[s][m] + &other.rows[s][m];
            }
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.order.min(other.order);
        let mut out = Self::zero(n);
        for s1 in 0..=n {
            for m1 in 0..=(n - s1) {
                let a = &self.rows[s1][m1];
                if a.is_zero() {
                    continue;
                }
                for s2 in 0..=(n - s1 - m1) {
                    for m2 in 0..=(n - s1 - m1 - s2) {
                        out.rows[s1 + s2][m1 + m2] += a * &other.rows[s2][m2];
                    }
                }
            }
        }
        out
    }

    /// `s(y, x)`.
    pub fn swapped(&self) -> Self {
        let mut out = Self::zero(self.order);
        for s in 0..=self.order {
            for m in 0..=(self.order - s) {
                out.rows[m][s] = self.rows[s][m].clone();
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(to_f64).collect()).collect()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let t = self.to_f64();
        let mut acc = 0.0;
        for (s, row) in t.iter().enumerate() {
            let inner = row.iter().rev().fold(0.0, |a, c| a * y + c);
            acc += inner * x.powi(s as i32);
        }
        acc
    }
}

/// Coefficients of `log((1 − x)(1 − y))/(xy − x − y)` up to total degree `P`,
/// by series division.
///
/// Writing `a·(xy − x − y) = log(1 − x) + log(1 − y)` and matching the
/// coefficient of `xˢyᵐ` gives `a_{s−1,m−1} − a_{s−1,m} − a_{s,m−1} = N_{s,m}`.
/// Each total degree is solved from the `x⁰` end; the equation left over at
/// the `y⁰` end is the division residual.
pub fn a_coeff_table(order: usize) -> Result<Series2D, CoefficientError> {
    if order > MAX_A_ORDER {
        return Err(CoefficientError::OrderTooLarge { order, max: MAX_A_ORDER });
    }
    a_table_unchecked(order)
}

fn a_table_unchecked(order: usize) -> Result<Series2D, CoefficientError> {
    let mut a = Series2D::zero(order);
    let numerator = |s: usize, m: usize| -> Rational {
        match (s, m) {
            (0, 0) => Rational::zero(),
            (0, k) | (k, 0) => rat(-1, k as i64),
            _ => Rational::zero(),
        }
    };
    // row of total degree d − 1 from equations of total degree d
    for d in 1..=(order + 1) {
        let unknown_deg = d - 1;
        a.rows[0][unknown_deg] = -numerator(0, d);
        for s in 1..=unknown_deg {
            let m = d - s;
            let prev_diag = if m >= 1 { a.rows[s - 1][m - 1].clone() } else { Rational::zero() };
            let v = prev_diag - &a.rows[s - 1][m] - numerator(s, m);
            a.rows[s][m - 1] = v;
        }
        let residual = -&a.rows[unknown_deg][0] - numerator(d, 0);
        if !residual.is_zero() {
            let r = to_f64(&residual).abs();
            if r > 1e-20 {
                return Err(CoefficientError::PrecisionLoss { order: unknown_deg, residual: r });
            }
        }
    }
    Ok(a)
}

/// `ρ(n, m) = [xᵐ] c(x)ⁿ` with `c(x) = log(1 − x)/x`; `ρ(0, m) = [m = 0]` and
/// zero for negative `m`.
struct Rho {
    table: Vec<Series1D>,
}

impl Rho {
    fn new(max_n: usize, max_m: usize) -> Self {
        let c = Series1D::c_series(max_m);
        let mut table = vec![Series1D::one(max_m)];
        for n in 1..=max_n {
            let next = table[n - 1].mul(&c);
            table.push(next);
        }
        Self { table }
    }

    fn get(&self, n: i64, m: i64) -> Rational {
        if n < 0 || m < 0 {
            return Rational::zero();
        }
        self.table[n as usize].coeffs[m as usize].clone()
    }
}

fn binomial(n: usize, k: usize) -> Rational {
    let mut r = BigInt::one();
    for i in 0..k {
        r = r * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    Rational::from_integer(r)
}

fn inv_factorial(n: usize) -> Rational {
    let f: BigInt = (1..=n).fold(BigInt::one(), |acc, k| acc * BigInt::from(k));
    Rational::new(BigInt::one(), f)
}

/// The drift cross-term coefficients
/// `b_{s,m} = Σ_{n=2}^{s+m+2} (1/n!) Σ_{i=2}^{n} Σ_{q=0}^{n−i} C(n−i, q) ρ(q+1, m−q) ρ(n−1−q, s+q−n+2)`.
pub fn b_coeff_table(order: usize) -> Result<Series2D, CoefficientError> {
    if order > MAX_B_ORDER {
        return Err(CoefficientError::OrderTooLarge { order, max: MAX_B_ORDER });
    }
    let rho = Rho::new(order + 3, order + 3);
    let mut b = Series2D::zero(order);
    for s in 0..=order {
        for m in 0..=(order - s) {
            let mut total = Rational::zero();
            for n in 2..=(s + m + 2) {
                let mut inner = Rational::zero();
                for i in 2..=n {
                    for q in 0..=(n - i) {
                        let r1 = rho.get(q as i64 + 1, m as i64 - q as i64);
                        if r1.is_zero() {
                            continue;
                        }
                        let r2 = rho.get(n as i64 - 1 - q as i64, s as i64 + q as i64 - n as i64 + 2);
                        inner += binomial(n - i, q) * r1 * r2;
                    }
                }
                total += inv_factorial(n) * inner;
            }
            b.rows[s][m] = total;
        }
    }
    Ok(b)
}

/// The `a` table from its defining recursion
/// `a_{s,m} = −Σ_{n=2}^{s+m+1} (1/n!) Σ_{l≤s, r≤m} a_{l,r} Σ_{q=0}^{n−1} C(n−1, q) ρ(q, s−q−l) ρ(n−1−q, m+1−n+q−r)`,
/// `a_{0,0} = 1`. Slow; meant as an independent check of [`a_coeff_table`].
pub fn a_coeff_recursion(order: usize) -> Series2D {
    let rho = Rho::new(order + 2, order + 2);
    let mut a = Series2D::zero(order);
    a.rows[0][0] = Rational::one();
    for d in 1..=order {
        for s in 0..=d {
            let m = d - s;
            let mut total = Rational::zero();
            for n in 2..=(s + m + 1) {
                let mut inner = Rational::zero();
                for l in 0..=s {
                    for r in 0..=m {
                        if l + r >= d {
                            continue;
                        }
                        let alr = a.rows[l][r].clone();
                        if alr.is_zero() {
                            continue;
                        }
                        let mut sum_q = Rational::zero();
                        for q in 0..n {
                            let r1 = rho.get(q as i64, s as i64 - q as i64 - l as i64);
                            if r1.is_zero() {
                                continue;
                            }
                            let r2 = rho.get((n - 1 - q) as i64, m as i64 + 1 - n as i64 + q as i64 - r as i64);
                            sum_q += binomial(n - 1, q) * r1 * r2;
                        }
                        inner += alr * sum_q;
                    }
                }
                total += inv_factorial(n) * inner;
            }
            a.rows[s][m] = -total;
        }
    }
    a
}

fn cached_a_f64() -> &'static Vec<Vec<f64>> {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| a_table_unchecked(CACHED_ORDER).expect("exact division has no residual").to_f64())
}

/// Power-series coefficients of `√a(z, z)`, the scalar diffusion factor on
/// isotropic noise.
pub fn diffusion_root_series(order: usize) -> Result<Vec<f64>, CoefficientError> {
    let a = a_table_unchecked(order)?;
    Ok(a.diagonal().sqrt()?.to_f64())
}

/// Below this `|d|` the closed form `log(1 + d)/d` switches to its series.
pub const REMOVABLE_THRESHOLD: f64 = 1e-6;

/// `log(1 + d)/d`, continuous through `d = 0`.
pub fn log1p_ratio(d: f64) -> f64 {
    if d.abs() < REMOVABLE_THRESHOLD {
        1.0 - d / 2.0 + d * d / 3.0 - d * d * d / 4.0
    } else {
        d.ln_1p() / d
    }
}

/// `a(x, y) = log((1 − x)(1 − y))/(xy − x − y)`.
///
/// The function depends on `(x, y)` only through `d = xy − x − y`, so near the
/// removable singularity its bivariate series is the series of
/// `log(1 + d)/d` in `d`. Requires `(1 − x)(1 − y) > 0`.
pub fn a_generating(x: f64, y: f64) -> f64 {
    log1p_ratio(x * y - x - y)
}

/// `log(1 − z)/z`, with value `−1` at `z = 0`.
pub fn c_generating(z: f64) -> f64 {
    if z.abs() < 1e-12 {
        -1.0 - z / 2.0
    } else {
        (-z).ln_1p() / z
    }
}

/// `Σ_{p=0}^{P} ηᵖ c_p (∇²f)ᵖ ∇f`.
pub fn truncated_drift(obj: &dyn Objective, x: &Vector, eta: f64, order: usize) -> Vector {
    let hv = obj.hessian_operator(x);
    let mut term = obj.gradient(x);
    let mut out = -term.clone();
    let mut eta_p = 1.0;
    for p in 1..=order {
        term = hv(&term);
        eta_p *= eta;
        out += &term * (eta_p * -1.0 / (p as f64 + 1.0));
    }
    out
}

/// `Σ_{p=1}^{P} ηᵖ Σ_{k<p} a_{k,p−1−k} (∇²f)ᵏ Σ (∇²f)^{p−1−k}`.
pub fn truncated_diffusion_sq(obj: &dyn Objective, noise: &dyn NoiseModel, x: &Vector, eta: f64, order: usize) -> Mat {
    let h = obj.hessian(x);
    let sigma = noise.covariance(x);
    let a = if order <= CACHED_ORDER + 1 {
        cached_a_f64().clone()
    } else {
        a_table_unchecked(order).expect("exact division has no residual").to_f64()
    };
    let n = h.nrows();
    let mut powers = vec![Mat::identity(n, n)];
    for k in 1..order {
        let next = &powers[k - 1] * &h;
        powers.push(next);
    }
    let left: Vec<Mat> = powers.iter().map(|pk| pk * &sigma).collect();
    let mut out = Mat::zeros(n, n);
    let mut eta_p = 1.0;
    for p in 1..=order {
        eta_p *= eta;
        for k in 0..p {
            out += &left[k] * &powers[p - 1 - k] * (eta_p * a[k][p - 1 - k]);
        }
    }
    out
}

/// CSV of `c_s` and `a_{s,m}` up to the given order.
pub fn coefficient_csv(order: usize) -> Result<String, CoefficientError> {
    let a = a_coeff_table(order)?;
    let mut out = String::from("kind,s,m,numerator,denominator,value\n");
    for s in 0..=order {
        let c = c_coeff(s);
        let _ = writeln!(out, "c,{s},-1,{},{},{:e}", c.numer(), c.denom(), to_f64(&c));
    }
    for s in 0..=order {
        for m in 0..=(order - s) {
            let v = a.get(s, m);
            let _ = writeln!(out, "a,{s},{m},{},{},{:e}", v.numer(), v.denom(), to_f64(v));
        }
    }
    Ok(out)
}

/// Largest `|a_{s,m} − a_{m,s}|` and `|b_{s,m} + b_{m,s}|` over `1 ≤ s+m ≤ P`,
/// plus whether `c_s = −1/(s+1)` for `s ≤ P` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub order: usize,
    pub c_exact: bool,
    pub a_symmetry: f64,
    pub b_antisymmetry: f64,
    pub b_diagonal: f64,
    pub a_row_matches_log: bool,
}

pub fn verify_identities(order: usize) -> Result<IdentityReport, CoefficientError> {
    let c = Series1D::log_one_minus(order + 1);
    let c_exact = (0..=order).all(|s| c.coeff(s + 1) == &c_coeff(s));
    let a = a_coeff_table(order)?;
    let b = b_coeff_table(order)?;
    let mut a_sym = Rational::zero();
    let mut b_anti = Rational::zero();
    let mut b_diag = Rational::zero();
    for s in 0..=order {
        for m in 0..=(order - s) {
            if s + m == 0 {
                continue;
            }
            a_sym = a_sym.max((a.get(s, m) - a.get(m, s)).abs());
            b_anti = b_anti.max((b.get(s, m) + b.get(m, s)).abs());
            if s == m {
                b_diag = b_diag.max(b.get(s, s).abs());
            }
        }
    }
    let a_row_matches_log = (0..=order).all(|s| a.get(s, 0) == &rat(1, s as i64 + 1));
    Ok(IdentityReport {
        order,
        c_exact,
        a_symmetry: to_f64(&a_sym),
        b_antisymmetry: to_f64(&b_anti),
        b_diagonal: to_f64(&b_diag),
        a_row_matches_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::problems::{make_isotropic_noise, ConstantNoise, QuadraticObjective};

    #[test]
    fn c_examples() {
        assert_eq!(c_coeff(0), rat(-1, 1));
        assert_eq!(c_coeff(1), rat(-1, 2));
        assert_eq!(c_coeff(19), rat(-1, 20));
    }

    #[test]
    fn c_matches_log_divided_by_x() {
        // log(1 − x) has zero constant term, so divide by x by shifting
        let log = Series1D::log_one_minus(21);
        for s in 0..=20 {
            assert_eq!(log.coeff(s + 1), &c_coeff(s));
        }
    }

    #[test]
    fn series_division_inverts_multiplication() {
        let p = Series1D::from_coeffs((0..10).map(|k| rat(k as i64 + 1, 3)).collect());
        let q = Series1D::from_coeffs((0..10).map(|k| rat(1, k as i64 + 2)).collect());
        assert_eq!(p.mul(&q).div(&q).unwrap(), p);
        assert!(p.div(&Series1D::x(9)).is_err());
    }

    #[test]
    fn sqrt_squares_back() {
        let p = Series1D::one(12).add(&Series1D::x(12).scale(&rat(3, 7)));
        let r = p.sqrt().unwrap();
        assert_eq!(r.mul(&r), p);
    }

    #[test]
    fn log_composition_matches_direct_series() {
        // log(1 − x) composed through log_one_minus_of(x)
        let direct = Series1D::log_one_minus(10);
        assert_eq!(Series1D::x(10).log_one_minus_of().unwrap(), direct);
    }

    #[test]
    fn a_table_basics() {
        let a = a_coeff_table(12).unwrap();
        assert_eq!(a.get(0, 0), &Rational::one());
        for s in 0..=12 {
            for m in 0..=(12 - s) {
                assert_eq!(a.get(s, m), a.get(m, s));
            }
            assert_eq!(a.get(s, 0), &rat(1, s as i64 + 1));
        }
        assert!(matches!(a_coeff_table(41), Err(CoefficientError::OrderTooLarge { .. })));
    }

    /// Independent route: a = log(1 + d)/d with d = xy − x − y, expanded as
    /// Σ (−d)ᵏ/(k + 1) by repeated bivariate multiplication.
    #[test]
    fn a_table_matches_expansion_in_d() {
        let order = 12;
        let mut d = Series2D::zero(order);
        d.set(1, 1, Rational::one());
        d.set(1, 0, rat(-1, 1));
        d.set(0, 1, rat(-1, 1));
        let mut acc = Series2D::zero(order);
        let mut power = Series2D::zero(order);
        power.set(0, 0, Rational::one());
        for k in 0..=(2 * order) {
            let mut term = power.clone();
            let coef = if k % 2 == 0 { rat(1, k as i64 + 1) } else { rat(-1, k as i64 + 1) };
            for s in 0..=order {
                for m in 0..=(order - s) {
                    let v = term.get(s, m) * &coef;
                    term.set(s, m, v);
                }
            }
            acc = acc.add(&term);
            power = power.mul(&d);
        }
        let a = a_coeff_table(order).unwrap();
        assert_eq!(acc, a);
        assert_eq!(a.get(1, 0), &rat(1, 2));
    }

    #[test]
    fn a_recursion_agrees_with_division() {
        let order = 8;
        assert_eq!(a_coeff_recursion(order), a_coeff_table(order).unwrap());
    }

    #[test]
    fn b_table_identities() {
        let b = b_coeff_table(8).unwrap();
        assert_eq!(b.get(0, 0), &rat(1, 2));
        for s in 0..=8 {
            for m in 0..=(8 - s) {
                if s + m >= 1 {
                    assert_eq!(b.get(s, m) + b.get(m, s), Rational::zero(), "({s},{m})");
                }
            }
        }
        for s in 1..=4 {
            assert!(b.get(s, s).is_zero());
        }
        // b(x,y) + b(y,x) truncates to the constant series 1
        let sym = b.add(&b.swapped());
        let mut one = Series2D::zero(8);
        one.set(0, 0, Rational::one());
        assert_eq!(sym, one);
        assert!(b.get(1, 0) != &Rational::zero());
    }

    #[test]
    fn series2d_restrictions_are_consistent() {
        let a = a_coeff_table(10).unwrap();
        let b = b_coeff_table(10).unwrap();
        let prod = a.mul(&b);
        assert_eq!(prod.at_y_zero(), a.at_y_zero().mul(&b.at_y_zero()));
        assert_eq!(prod.at_x_zero(), a.at_x_zero().mul(&b.at_x_zero()));
        let px = Series1D::log_one_minus(10);
        assert_eq!(Series2D::from_x(&px).at_y_zero(), px);
        assert_eq!(Series2D::from_y(&px).at_x_zero(), px);
    }

    #[test]
    fn a_diagonal_sqrt_is_the_root_series() {
        let g = diffusion_root_series(20).unwrap();
        for z in [-0.3, 0.1, 0.4] {
            let w: f64 = (1.0 - z) * (1.0 - z);
            let direct = w.ln() / (z * z - 2.0 * z);
            let series: f64 = g.iter().rev().fold(0.0, |acc, c| acc * z + c);
            assert!((series * series - direct).abs() < 1e-6, "z={z}");
        }
    }

    #[test]
    fn truncated_drift_low_orders() {
        let q = QuadraticObjective::new(Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let x = Vector::from_vec(vec![0.7, -0.2]);
        let g = q.gradient(&x);
        assert_eq!(truncated_drift(&q, &x, 0.1, 0), -g.clone());
        let sme2 = -&g - q.hessian(&x) * &g * 0.05;
        assert!((truncated_drift(&q, &x, 0.1, 1) - sme2).amax() < 1e-15);
    }

    #[test]
    fn truncated_drift_converges_geometrically() {
        for (lam, eta) in [(1.0, 0.5), (0.5, 0.4), (-1.0, 0.3)] {
            let q = QuadraticObjective::diagonal(&[lam]);
            let x = Vector::from_element(1, 1.0);
            let z: f64 = eta * lam;
            let closed = (-z).ln_1p() / z * lam;
            for p in [5, 10, 20] {
                let t = truncated_drift(&q, &x, eta, p)[0];
                assert!((t - closed).abs() <= 2.0 * z.abs().powi(p as i32 + 1), "λ={lam} η={eta} P={p}");
            }
        }
    }

    #[test]
    fn truncated_diffusion_low_orders() {
        let q = QuadraticObjective::new(Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let noise = ConstantNoise::new(sigma.clone()).unwrap();
        let x = Vector::zeros(2);
        assert!(max_abs(&(truncated_diffusion_sq(&q, &noise, &x, 0.1, 1) - &sigma * 0.1)) < 1e-15);
        let flat = QuadraticObjective::diagonal(&[0.0, 0.0]);
        assert!(max_abs(&(truncated_diffusion_sq(&flat, &noise, &x, 0.1, 30) - &sigma * 0.1)) < 1e-15);
        let d = truncated_diffusion_sq(&q, &noise, &x, 0.2, 25);
        assert!(crate::linalg::asymmetry(&d) < 1e-15);
    }

    #[test]
    fn truncated_diffusion_one_dimensional_closed_form() {
        let q = QuadraticObjective::diagonal(&[1.0]);
        let noise = make_isotropic_noise(1, 1.0).unwrap();
        let eta: f64 = 0.3;
        let w = (1.0 - eta) * (1.0 - eta);
        let closed = eta * w.ln() / (w - 1.0);
        let d = truncated_diffusion_sq(&q, &noise, &Vector::zeros(1), eta, 40)[(0, 0)];
        assert!((d - closed).abs() < 1e-12);
    }

    #[test]
    fn generating_functions_match_tables() {
        let a = a_coeff_table(30).unwrap();
        for (x, y) in [(0.1, 0.2), (-0.2, 0.05), (0.3, 0.3), (1e-4, -1e-4)] {
            assert!((a.eval(x, y) - a_generating(x, y)).abs() < 1e-12, "({x},{y})");
        }
        assert_eq!(a_generating(0.0, 0.0), 1.0);
        let c = Series1D::c_series(40);
        for z in [0.0, 1e-13, 0.2, -0.3] {
            assert!((c.eval(z) - c_generating(z)).abs() < 1e-14);
        }
        // both sides of the switch agree
        let d = REMOVABLE_THRESHOLD;
        assert!((log1p_ratio(d * 0.999) - log1p_ratio(d * 1.001)).abs() < 1e-9);
    }

    #[test]
    fn coefficient_csv_lists_everything() {
        let csv = coefficient_csv(3).unwrap();
        assert!(csv.starts_with("kind,s,m,numerator,denominator,value\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 10);
        assert!(csv.contains("c,1,-1,-1,2,"));
        assert!(csv.contains("a,1,0,1,2,"));
    }

    #[test]
    fn identity_report_is_clean() {
        let r = verify_identities(10).unwrap();
        assert!(r.c_exact && r.a_row_matches_log);
        assert_eq!((r.a_symmetry, r.b_antisymmetry, r.b_diagonal), (0.0, 0.0, 0.0));
    }
}
