//! Expected exit times from a compact set: 1D quadrature of the closed-form
//! double integral, Monte Carlo for any dimension, and asymptotic probes.

use crate::linalg::{Mat, Vector};
use crate::problems::{make_isotropic_noise, standard_normal_vector, NoiseModel, Objective, QuadraticObjective};
use crate::proxies::{build, Mode, ProxyError, ProxyKind, SdeModel};
use crate::simulate::{stream_rng, SimError, ROLE_EXIT};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_QUAD_TOL: f64 = 1e-6;
const MAX_GRID: usize = 1 << 20;
const CENSOR_FLAG: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EscapeError {
    #[error("diffusion is not positive on the domain (min {0:e})")]
    DegenerateDiffusion(f64),
    #[error("need at least 3 step sizes, got {0}")]
    InsufficientPoints(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("quadrature did not reach tolerance {tol:e} (last change {change:e})")]
    QuadratureNotConverged { tol: f64, change: f64 },
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Quadrature,
    MonteCarlo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Quadrature => "quadrature",
            Method::MonteCarlo => "monte-carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitTimeReport {
    pub lower: Vector,
    pub upper: Vector,
    pub e_tau: f64,
    pub method: Method,
    /// Achieved relative tolerance (quadrature) or standard error (MC).
    pub tol_or_stderr: f64,
    pub eta: f64,
    pub n_runs: usize,
    pub censored_fraction: f64,
    /// More than 1% of paths were censored, so `e_tau` underestimates.
    pub biased_low: bool,
    /// The 1D domain or coefficients are not symmetric about the start point.
    /// The general two-sided Green's-function formula covers this case.
    pub asymmetric: bool,
}

impl ExitTimeReport {
    pub fn csv_header() -> &'static str {
        "eta,method,E_tau,stderr_or_tol,censored_fraction"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{:e},{}", self.eta, self.method.name(), self.e_tau, self.tol_or_stderr, self.censored_fraction)
    }
}

pub fn reports_csv(reports: &[ExitTimeReport]) -> String {
    let mut out = format!("{}\n", ExitTimeReport::csv_header());
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

fn coefficients_1d(model: &SdeModel, x: f64) -> Result<(f64, f64), EscapeError> {
    if model.dim() != 1 || model.mode != Mode::Real {
        return Err(EscapeError::Invalid("1D analysis needs a one-dimensional real-mode model".into()));
    }
    let p = Vector::from_element(1, x);
    Ok((model.drift(&p)?[0], model.diffusion_sq(&p)?[(0, 0)]))
}

fn psi_prime(model: &SdeModel, x: f64) -> Result<f64, EscapeError> {
    let (b, d) = coefficients_1d(model, x)?;
    if !(d > 0.0) {
        return Err(EscapeError::DegenerateDiffusion(d));
    }
    Ok(-2.0 * b / d)
}

/// Cumulative trapezoid of `ψ′ = −2b/𝒟` on a sorted grid, shifted so that
/// `ψ(0) = 0`.
pub fn psi_profile(model: &SdeModel, grid: &[f64]) -> Result<Vec<f64>, EscapeError> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EscapeError::Invalid("grid must be strictly increasing with at least 2 points".into()));
    }
    let dpsi: Vec<f64> = grid.iter().map(|&x| psi_prime(model, x)).collect::<Result<_, _>>()?;
    let mut psi = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        psi[i] = psi[i - 1] + 0.5 * (dpsi[i] + dpsi[i - 1]) * (grid[i] - grid[i - 1]);
    }
    // ψ at 0 on the same (unnormalized) scale
    let i = grid.iter().position(|&x| x > 0.0).unwrap_or(grid.len());
    let at_zero = if i == 0 {
        -integrate_psi_prime(model, 0.0, grid[0])?
    } else {
        psi[i - 1] + integrate_psi_prime(model, grid[i - 1], 0.0)?
    };
    Ok(psi.into_iter().map(|p| p - at_zero).collect())
}

fn integrate_psi_prime(model: &SdeModel, from: f64, to: f64) -> Result<f64, EscapeError> {
    if from == to {
        return Ok(0.0);
    }
    let n = 64;
    let h = (to - from) / n as f64;
    let mut s = 0.0;
    let mut prev = psi_prime(model, from)?;
    for k in 1..=n {
        let next = psi_prime(model, from + k as f64 * h)?;
        s += 0.5 * (prev + next) * h;
        prev = next;
    }
    Ok(s)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `E_x0[τ]` for `[lower, upper]` on a uniform grid of `n` intervals using the
/// scale/speed Green's function, all exponentials in log space.
fn exit_time_on_grid(model: &SdeModel, lower: f64, upper: f64, x0: f64, n: usize) -> Result<f64, EscapeError> {
    let h = (upper - lower) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lower + i as f64 * h).collect();
    let mut dpsi = Vec::with_capacity(n + 1);
    let mut diff = Vec::with_capacity(n + 1);
    for &x in &xs {
        let (b, d) = coefficients_1d(model, x)?;
        if !(d > 0.0) {
            return Err(EscapeError::DegenerateDiffusion(d));
        }
        dpsi.push(-2.0 * b / d);
        diff.push(d);
    }
    let mut psi = vec![0.0; n + 1];
    for i in 1..=n {
        psi[i] = psi[i - 1] + 0.5 * h * (dpsi[i] + dpsi[i - 1]);
    }
    // log s(x_i) − s(lower) with s′ = e^ψ (trapezoid in log space)
    let mut log_s = vec![f64::NEG_INFINITY; n + 1];
    for i in 1..=n {
        let seg = log_add(psi[i - 1], psi[i]) + (0.5 * h).ln();
        log_s[i] = log_add(log_s[i - 1], seg);
    }
    // log (s(upper) − s(x_i)) by reverse accumulation
    let mut log_rs = vec![f64::NEG_INFINITY; n + 1];
    for i in (0..n).rev() {
        let seg = log_add(psi[i], psi[i + 1]) + (0.5 * h).ln();
        log_rs[i] = log_add(log_rs[i + 1], seg);
    }
    let log_total = log_s[n];
    // s(x0) by linear interpolation between nodes
    let j = (((x0 - lower) / h).floor() as usize).min(n - 1);
    let w = (x0 - xs[j]) / h;
    let interp = |v: &[f64]| -> f64 {
        // interpolate in linear space relative to the larger endpoint
        let m = v[j].max(v[j + 1]);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + ((1.0 - w) * (v[j] - m).exp() + w * (v[j + 1] - m).exp()).ln()
    };
    let log_s0 = interp(&log_s);
    let log_rs0 = interp(&log_rs);
    // E τ = ∫ G(x0, y) m(y) dy, m(y) = 2 e^{−ψ(y)}/𝒟(y),
    // G = (s(x0∧y) − s(l))(s(u) − s(x0∨y))/(s(u) − s(l))
    let mut total = 0.0;
    let mut prev = None;
    for i in 0..=n {
        let y = xs[i];
        let log_g = if y <= x0 { log_s[i] + log_rs0 } else { log_s0 + log_rs[i] } - log_total;
        let val = if log_g == f64::NEG_INFINITY { 0.0 } else { 2.0 * (log_g - psi[i]).exp() / diff[i] };
        if let Some(p) = prev {
            total += 0.5 * h * (p + val);
        }
        prev = Some(val);
    }
    Ok(total)
}

/// Expected exit time from `[−a, a]` starting at 0 by nested quadrature,
/// refined by grid doubling with Richardson extrapolation until the relative
/// change is below `quad_tol`.
pub fn hitting_time_1d(model: &SdeModel, a: f64, quad_tol: f64) -> Result<ExitTimeReport, EscapeError> {
    hitting_time_interval(model, -a, a, 0.0, quad_tol)
}

pub fn hitting_time_interval(model: &SdeModel, lower: f64, upper: f64, x0: f64, quad_tol: f64) -> Result<ExitTimeReport, EscapeError> {
    if !(lower < x0 && x0 < upper) {
        return Err(EscapeError::Invalid(format!("x0 = {x0} must lie strictly inside ({lower}, {upper})")));
    }
    let asymmetric = ((upper - x0) - (x0 - lower)).abs() > 1e-12 * (upper - lower)
        || !symmetric_about(model, x0, (upper - x0).min(x0 - lower))?;
    let mut n = 256;
    let mut coarse = exit_time_on_grid(model, lower, upper, x0, n)?;
    let mut prev_extrap = f64::NAN;
    loop {
        n *= 2;
        let fine = exit_time_on_grid(model, lower, upper, x0, n)?;
        let extrap = (4.0 * fine - coarse) / 3.0;
        let change = (extrap - prev_extrap).abs().min((fine - coarse).abs());
        if change <= quad_tol * extrap.abs() {
            return Ok(ExitTimeReport {
                lower: Vector::from_element(1, lower),
                upper: Vector::from_element(1, upper),
                e_tau: extrap,
                method: Method::Quadrature,
                tol_or_stderr: (change / extrap.abs()).max(f64::EPSILON),
                eta: model.eta,
                n_runs: 0,
                censored_fraction: 0.0,
                biased_low: false,
                asymmetric,
            });
        }
        if n >= MAX_GRID {
            return Err(EscapeError::QuadratureNotConverged { tol: quad_tol, change: change / extrap.abs() });
        }
        coarse = fine;
        prev_extrap = extrap;
    }
}

fn symmetric_about(model: &SdeModel, c: f64, half: f64) -> Result<bool, EscapeError> {
    for i in 1..=16 {
        let t = half * i as f64 / 16.0;
        let (bp, dp) = coefficients_1d(model, c + t)?;
        let (bm, dm) = coefficients_1d(model, c - t)?;
        let scale = bp.abs().max(dp.abs()).max(1e-300);
        if (bp + bm).abs() > 1e-8 * scale || (dp - dm).abs() > 1e-8 * dp.abs().max(1e-300) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Region left by the process in [`exit_time_mc`].
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box { lower: Vector, upper: Vector },
    Ball { center: Vector, radius: f64 },
}

impl Region {
    pub fn symmetric_box(dim: usize, half: f64) -> Self {
        Region::Box { lower: Vector::from_element(dim, -half), upper: Vector::from_element(dim, half) }
    }

    pub fn contains(&self, x: &Vector) -> bool {
        match self {
            Region::Box { lower, upper } => x.iter().zip(lower.iter().zip(upper.iter())).all(|(v, (l, u))| *l < *v && *v < *u),
            Region::Ball { center, radius } => (x - center).norm() < *radius,
        }
    }

    fn bounds(&self) -> (Vector, Vector) {
        match self {
            Region::Box { lower, upper } => (lower.clone(), upper.clone()),
            Region::Ball { center, radius } => (center.add_scalar(-radius), center.add_scalar(*radius)),
        }
    }

    /// Probability that a Brownian bridge between two interior points with
    /// covariance `𝒟 dt` touched the boundary.
    fn bridge_crossing(&self, x: &Vector, y: &Vector, dsq_dt: &Mat) -> f64 {
        match self {
            Region::Box { lower, upper } => {
                let mut stay = 1.0;
                for i in 0..x.len() {
                    let v = dsq_dt[(i, i)];
                    if v <= 0.0 {
                        continue;
                    }
                    for (da, db) in [(upper[i] - x[i], upper[i] - y[i]), (x[i] - lower[i], y[i] - lower[i])] {
                        stay *= 1.0 - (-2.0 * da * db / v).exp();
                    }
                }
                1.0 - stay
            }
            Region::Ball { center, radius } => {
                let r = x - center;
                let norm = r.norm();
                if norm == 0.0 {
                    return 0.0;
                }
                let n = r / norm;
                let v = n.dot(&(dsq_dt * &n));
                if v <= 0.0 {
                    return 0.0;
                }
                let da = radius - norm;
                let db = radius - (y - center).norm();
                (-2.0 * da * db / v).exp()
            }
        }
    }
}

/// Monte Carlo settings for [`exit_time_mc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub dt: f64,
    pub n_runs: usize,
    pub t_cap: f64,
    pub seed: u64,
    /// Brownian-bridge correction for crossings between grid times.
    pub bridge: bool,
}

/// Mean first exit time of `model` from `region`, from `x0`. Censored paths
/// contribute `t_cap`.
pub fn exit_time_mc(model: &SdeModel, region: &Region, x0: &Vector, settings: McSettings) -> Result<ExitTimeReport, EscapeError> {
    let exit_times = exit_times_mc(model, region, x0, settings)?;
    let n = exit_times.len() as f64;
    let censored = exit_times.iter().filter(|t| t.is_none()).count();
    let vals: Vec<f64> = exit_times.iter().map(|t| t.unwrap_or(settings.t_cap)).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let censored_fraction = censored as f64 / n;
    let (lower, upper) = region.bounds();
    Ok(ExitTimeReport {
        lower,
        upper,
        e_tau: mean,
        method: Method::MonteCarlo,
        tol_or_stderr: (var / n).sqrt(),
        eta: model.eta,
        n_runs: exit_times.len(),
        censored_fraction,
        biased_low: censored_fraction > CENSOR_FLAG,
        asymmetric: false,
    })
}

/// Per-path exit times (`None` when censored at `t_cap`).
pub fn exit_times_mc(model: &SdeModel, region: &Region, x0: &Vector, s: McSettings) -> Result<Vec<Option<f64>>, EscapeError> {
    if model.mode != Mode::Real {
        return Err(EscapeError::Invalid("exit times are simulated for real-mode models".into()));
    }
    if !region.contains(x0) {
        return Err(EscapeError::Invalid("x0 must lie strictly inside the region".into()));
    }
    if !(s.dt > 0.0) || !(s.t_cap > 0.0) || s.n_runs < 2 {
        return Err(EscapeError::Invalid("need dt > 0, t_cap > 0 and at least 2 runs".into()));
    }
    let max_steps = (s.t_cap / s.dt).ceil() as usize;
    let sq = s.dt.sqrt();
    let dim = model.dim();
    (0..s.n_runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(s.seed, ROLE_EXIT, i as u64);
            let mut x = x0.clone();
            for step in 1..=max_steps {
                let zeta = standard_normal_vector(dim, &mut rng);
                let (b, dz) = model.step_terms(&x, &zeta)?;
                let y = &x + b * s.dt + dz * sq;
                let t = step as f64 * s.dt;
                if !region.contains(&y) {
                    return Ok(Some(t));
                }
                if s.bridge {
                    let p = region.bridge_crossing(&x, &y, &(model.diffusion_sq(&x)? * s.dt));
                    if rng.gen::<f64>() < p {
                        return Ok(Some(t - 0.5 * s.dt));
                    }
                }
                x = y;
            }
            Ok(None)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// `η log E[τ]` should converge.
    MinExp,
    /// `E[τ]/log(1/η)` should stay in a band.
    MaxLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub etas: Vec<f64>,
    pub e_tau: Vec<f64>,
    /// `η log E[τ]` or `E[τ]/log(1/η)` per point.
    pub functional: Vec<f64>,
    /// Relative change of the functional over the last two points.
    pub last_change: f64,
    /// `max/min` of the functional over all points.
    pub band_ratio: f64,
    /// The last functional value.
    pub estimate: f64,
}

pub fn scaling_probe(kind: ProbeKind, points: &[(f64, f64)]) -> Result<ProbeReport, EscapeError> {
    if points.len() < 3 {
        return Err(EscapeError::InsufficientPoints(points.len()));
    }
    let functional: Vec<f64> = points
        .iter()
        .map(|&(eta, tau)| match kind {
            ProbeKind::MinExp => eta * tau.ln(),
            ProbeKind::MaxLog => tau / (1.0 / eta).ln(),
        })
        .collect();
    let n = functional.len();
    let last_change = ((functional[n - 1] - functional[n - 2]) / functional[n - 1]).abs();
    let max = functional.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = functional.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        kind,
        etas: points.iter().map(|p| p.0).collect(),
        e_tau: points.iter().map(|p| p.1).collect(),
        estimate: functional[n - 1],
        functional,
        last_change,
        band_ratio: max / min,
    })
}

/// HA-SME on `f = ½λx²`, `Σ = σ²`.
pub fn hasme_1d(lambda: f64, sigma2: f64, eta: f64) -> Result<SdeModel, EscapeError> {
    let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::diagonal(&[lambda]));
    let noise: Arc<dyn NoiseModel> = Arc::new(make_isotropic_noise(1, sigma2).map_err(|e| EscapeError::Invalid(e.to_string()))?);
    Ok(build(ProxyKind::HaSme, obj, noise, eta, Mode::Real, &Vector::zeros(1))?)
}

/// Quadrature exit times of HA-SME on `f = ½λx²` from `[−a, a]` over an η grid.
pub fn hasme_exit_suite(lambda: f64, sigma2: f64, a: f64, etas: &[f64], quad_tol: f64) -> Result<Vec<ExitTimeReport>, EscapeError> {
    etas.iter().map(|&eta| hitting_time_1d(&hasme_1d(lambda, sigma2, eta)?, a, quad_tol)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleCompareRow {
    pub kind: ProxyKind,
    pub report: ExitTimeReport,
    pub finite_fraction: f64,
}

/// Exit times of HA-SME and SME-2 from the box `[−half, half]²` around a saddle
/// `diag(λ₊, λ₋)` with `Σ = σ²I`, started at the origin.
pub fn saddle_compare(
    lambdas: [f64; 2],
    sigma2: f64,
    eta: f64,
    half: f64,
    settings: McSettings,
) -> Result<Vec<SaddleCompareRow>, EscapeError> {
    let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::diagonal(&lambdas));
    let noise: Arc<dyn NoiseModel> = Arc::new(make_isotropic_noise(2, sigma2).map_err(|e| EscapeError::Invalid(e.to_string()))?);
    let x0 = Vector::zeros(2);
    let region = Region::symmetric_box(2, half);
    [ProxyKind::HaSme, ProxyKind::Sme2]
        .into_iter()
        .map(|kind| {
            let model = build(kind, obj.clone(), noise.clone(), eta, Mode::Real, &x0)?;
            let report = exit_time_mc(&model, &region, &x0, settings)?;
            Ok(SaddleCompareRow { kind, finite_fraction: 1.0 - report.censored_fraction, report })
        })
        .collect()
}
