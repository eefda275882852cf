//! SGD runner, Euler–Maruyama integration and reproducible Monte Carlo.
//!
//! Every trajectory draws from its own ChaCha8 stream selected by
//! `(master_seed, role, index)`, so ensemble results do not depend on the
//! number of threads. Paths are reduced in fixed-size chunks whose partial
//! sums are combined pairwise in index order.

use crate::linalg::{CVector, Mat, Vector};
use crate::problems::{standard_normal_vector, NoiseModel, Objective};
use crate::proxies::{Mode, ProxyError, SdeModel};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_SUBSTEPS: usize = 20;
const CHUNK: usize = 16;

pub const ROLE_SGD: u64 = 1;
pub const ROLE_SDE: u64 = 2;
pub const ROLE_EXIT: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("error {error:e} at η = {eta} is below 3 standard errors ({stderr:e})")]
    BelowNoiseFloor { eta: f64, error: f64, stderr: f64 },
    #[error("need at least 3 points, got {0}")]
    InsufficientPoints(usize),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

/// Independent generator for trajectory `index` in the given role.
pub fn stream_rng(master_seed: u64, role: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((role << 40) | index);
    rng
}

/// States sampled at `t = kη`. Complex paths keep imaginary parts in `imag`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub imag: Option<Vec<Vector>>,
    /// First step whose state was not finite; the trajectory stops before it.
    pub diverged_at: Option<usize>,
}

fn all_finite(x: &Vector) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Sum of `m` standard normal vectors scaled by `1/√m`, drawn in the same
/// order as an Euler–Maruyama path with `m` substeps per step.
fn coupled_normal(dim: usize, m: usize, rng: &mut ChaCha8Rng) -> Vector {
    if m == 1 {
        return standard_normal_vector(dim, rng);
    }
    let mut acc = Vector::zeros(dim);
    for _ in 0..m {
        acc += standard_normal_vector(dim, rng);
    }
    acc / (m as f64).sqrt()
}

/// SGD `x_{k+1} = x_k − η(∇f(x_k) + ξ_k)`. Each noise draw consumes
/// `draws_per_step` standard normal vectors, which couples the run to an SDE
/// path with that many substeps on the same stream.
pub fn run_sgd_coupled(
    obj: &dyn Objective,
    noise: &dyn NoiseModel,
    eta: f64,
    x0: &Vector,
    steps: usize,
    rng: &mut ChaCha8Rng,
    draws_per_step: usize,
    mut visit: impl FnMut(usize, &Vector),
) -> Option<usize> {
    let mut x = x0.clone();
    visit(0, &x);
    for k in 1..=steps {
        // ξ = −Σ^{1/2}ζ has the law of Σ^{1/2}ζ and lines up with the SDE's dW
        let zeta = -coupled_normal(x.len(), draws_per_step.max(1), rng);
        let g = obj.gradient(&x) + noise.transform(&x, &zeta);
        x -= g * eta;
        if !all_finite(&x) {
            return Some(k);
        }
        visit(k, &x);
    }
    None
}

pub fn run_sgd(
    obj: &dyn Objective,
    noise: &dyn NoiseModel,
    eta: f64,
    x0: &Vector,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut states = Vec::with_capacity(steps + 1);
    let diverged_at = run_sgd_coupled(obj, noise, eta, x0, steps, rng, 1, |_, x| states.push(x.clone()));
    let times = (0..states.len()).map(|k| k as f64 * eta).collect();
    Trajectory { times, states, imag: None, diverged_at }
}

fn check_substeps(substeps: usize, richardson: bool) -> Result<(), SimError> {
    if substeps == 0 {
        return Err(SimError::InvalidConfig("substeps_per_eta must be at least 1".into()));
    }
    if richardson && substeps % 2 != 0 {
        return Err(SimError::InvalidConfig("Richardson extrapolation needs an even substep count".into()));
    }
    Ok(())
}

/// One Euler–Maruyama state, real or complex.
#[derive(Debug, Clone)]
enum State {
    Real(Vector),
    Complex(CVector),
}

impl State {
    fn new(model: &SdeModel, x0: &Vector) -> Self {
        match model.mode {
            Mode::Real => State::Real(x0.clone()),
            Mode::Complex => State::Complex(x0.map(|v| Complex64::new(v, 0.0))),
        }
    }

    fn advance(&mut self, model: &SdeModel, dt: f64, zeta: &Vector) -> Result<(), ProxyError> {
        let sq = dt.sqrt();
        match self {
            State::Real(x) => {
                let (b, dz) = model.step_terms(x, zeta)?;
                *x += b * dt + dz * sq;
            }
            State::Complex(z) => {
                let b = model.complex_drift_matrix().expect("complex model");
                let d = model.diffusion_complex()?;
                let drift = b * &*z;
                let noise = d * zeta.map(|v| Complex64::new(v * sq, 0.0));
                *z += drift * Complex64::new(dt, 0.0) + noise;
            }
        }
        Ok(())
    }

    fn real(&self) -> Vector {
        match self {
            State::Real(x) => x.clone(),
            State::Complex(z) => z.map(|c| c.re),
        }
    }

    fn imag(&self) -> Option<Vector> {
        match self {
            State::Real(_) => None,
            State::Complex(z) => Some(z.map(|c| c.im)),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            State::Real(x) => all_finite(x),
            State::Complex(z) => z.iter().all(|c| c.re.is_finite() && c.im.is_finite()),
        }
    }
}

/// Snapshot handed to path visitors: real part, imaginary part (complex
/// mode) and the Richardson weight.
pub struct Snapshot<'a> {
    pub weight: f64,
    pub re: &'a Vector,
    pub im: Option<&'a Vector>,
}

/// Integrates `model` for `steps` multiples of `η`, calling `visit(k, snaps)`
/// at every `t = kη`. With `richardson`, a coarse path with half the substeps
/// is driven by pairwise sums of the fine increments and the snapshots carry
/// weights `2` (fine) and `−1` (coarse).
pub fn integrate_path(
    model: &SdeModel,
    x0: &Vector,
    steps: usize,
    substeps: usize,
    richardson: bool,
    rng: &mut ChaCha8Rng,
    mut visit: impl FnMut(usize, &[Snapshot<'_>]),
) -> Result<Option<usize>, SimError> {
    check_substeps(substeps, richardson)?;
    let dim = model.dim();
    let dt = model.eta / substeps as f64;
    let mut fine = State::new(model, x0);
    let mut coarse = richardson.then(|| fine.clone());
    let emit = |k: usize, fine: &State, coarse: &Option<State>, visit: &mut dyn FnMut(usize, &[Snapshot<'_>])| {
        let fr = fine.real();
        let fi = fine.imag();
        match coarse {
            None => visit(k, &[Snapshot { weight: 1.0, re: &fr, im: fi.as_ref() }]),
            Some(c) => {
                let cr = c.real();
                let ci = c.imag();
                visit(
                    k,
                    &[
                        Snapshot { weight: 2.0, re: &fr, im: fi.as_ref() },
                        Snapshot { weight: -1.0, re: &cr, im: ci.as_ref() },
                    ],
                )
            }
        }
    };
    emit(0, &fine, &coarse, &mut visit);
    for k in 1..=steps {
        let mut j = 0;
        while j < substeps {
            let z1 = standard_normal_vector(dim, rng);
            fine.advance(model, dt, &z1)?;
            if let Some(c) = coarse.as_mut() {
                let z2 = standard_normal_vector(dim, rng);
                fine.advance(model, dt, &z2)?;
                c.advance(model, 2.0 * dt, &((z1 + z2) / std::f64::consts::SQRT_2))?;
                j += 2;
            } else {
                j += 1;
            }
        }
        if !fine.is_finite() || coarse.as_ref().is_some_and(|c| !c.is_finite()) {
            return Ok(Some(k));
        }
        emit(k, &fine, &coarse, &mut visit);
    }
    Ok(None)
}

/// Euler–Maruyama with `dt = η/substeps`, sampled at `t = kη` up to `t_end`.
pub fn euler_maruyama(
    model: &SdeModel,
    x0: &Vector,
    t_end: f64,
    substeps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, SimError> {
    let steps = horizon_steps(t_end, model.eta)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut imag = Vec::new();
    let diverged_at = integrate_path(model, x0, steps, substeps, false, rng, |_, snaps| {
        states.push(snaps[0].re.clone());
        if let Some(im) = snaps[0].im {
            imag.push(im.clone());
        }
    })?;
    let times = (0..states.len()).map(|k| k as f64 * model.eta).collect();
    let imag = (model.mode == Mode::Complex).then_some(imag);
    Ok(Trajectory { times, states, imag, diverged_at })
}

fn horizon_steps(t_end: f64, eta: f64) -> Result<usize, SimError> {
    if !(eta > 0.0) || !(t_end >= 0.0) {
        return Err(SimError::InvalidConfig(format!("need η > 0 and t_end ≥ 0, got η = {eta}, t_end = {t_end}")));
    }
    let k = (t_end / eta).round();
    if (k * eta - t_end).abs() > 1e-9 * t_end.max(eta) {
        return Err(SimError::InvalidConfig(format!("t_end = {t_end} is not a multiple of η = {eta}")));
    }
    Ok(k as usize)
}

pub type FunctionalFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// Named scalar test function `u(x)`.
#[derive(Clone)]
pub struct Functional {
    pub name: String,
    pub f: FunctionalFn,
}

impl Functional {
    pub fn new(name: impl Into<String>, f: impl Fn(&Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    pub fn objective(obj: Arc<dyn Objective>) -> Self {
        Self::new("f", move |x| obj.value(x))
    }

    pub fn coordinate(i: usize) -> Self {
        Self::new(format!("x{i}"), move |x| x[i])
    }
}

impl std::fmt::Debug for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Functional({})", self.name)
    }
}

/// What one ensemble member simulates.
#[derive(Clone)]
pub enum Runner {
    Sgd { obj: Arc<dyn Objective>, noise: Arc<dyn NoiseModel>, eta: f64, x0: Vector, steps: usize },
    Sde { model: SdeModel, x0: Vector, steps: usize, substeps: usize, richardson: bool },
}

impl Runner {
    pub fn steps(&self) -> usize {
        match self {
            Runner::Sgd { steps, .. } | Runner::Sde { steps, .. } => *steps,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            Runner::Sgd { eta, .. } => *eta,
            Runner::Sde { model, .. } => model.eta,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Runner::Sgd { x0, .. } | Runner::Sde { x0, .. } => x0.len(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match self {
            Runner::Sgd { eta, .. } if !(*eta > 0.0) => Err(SimError::InvalidConfig(format!("η must be positive, got {eta}"))),
            Runner::Sde { model, substeps, richardson, .. } => {
                if !(model.eta > 0.0) {
                    return Err(SimError::InvalidConfig(format!("η must be positive, got {}", model.eta)));
                }
                check_substeps(*substeps, *richardson)
            }
            _ => Ok(()),
        }
    }

    /// Runs one member, reporting snapshots at every `t = kη`. `draws` is the
    /// number of normal vectors an SGD step consumes.
    fn run(
        &self,
        rng: &mut ChaCha8Rng,
        draws: usize,
        visit: &mut dyn FnMut(usize, &[Snapshot<'_>]),
    ) -> Result<Option<usize>, SimError> {
        match self {
            Runner::Sgd { obj, noise, eta, x0, steps } => Ok(run_sgd_coupled(
                obj.as_ref(),
                noise.as_ref(),
                *eta,
                x0,
                *steps,
                rng,
                draws,
                |k, x| visit(k, &[Snapshot { weight: 1.0, re: x, im: None }]),
            )),
            Runner::Sde { model, x0, steps, substeps, richardson } => {
                integrate_path(model, x0, *steps, *substeps, *richardson, rng, |k, s| visit(k, s))
            }
        }
    }

    fn substeps(&self) -> usize {
        match self {
            Runner::Sgd { .. } => 1,
            Runner::Sde { substeps, .. } => *substeps,
        }
    }
}

/// Running sums over ensemble members for a `steps × slots` table.
#[derive(Debug, Clone)]
struct Accum {
    slots: usize,
    count: Vec<u64>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    diverged: usize,
}

impl Accum {
    fn new(rows: usize, slots: usize) -> Self {
        Self { slots, count: vec![0; rows], sum: vec![0.0; rows * slots], sumsq: vec![0.0; rows * slots], diverged: 0 }
    }

    fn add_row(&mut self, k: usize, values: &[f64]) {
        self.count[k] += 1;
        let base = k * self.slots;
        for (j, v) in values.iter().enumerate() {
            self.sum[base + j] += v;
            self.sumsq[base + j] += v * v;
        }
    }

    fn merge(mut self, other: &Accum) -> Self {
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        self.diverged += other.diverged;
        self
    }

    fn mean(&self, k: usize, j: usize) -> f64 {
        self.sum[k * self.slots + j] / self.count[k] as f64
    }

    /// Standard error of the slot mean (sample standard deviation over `√n`).
    fn stderr(&self, k: usize, j: usize) -> f64 {
        let n = self.count[k] as f64;
        if n < 2.0 {
            return f64::NAN;
        }
        let m = self.mean(k, j);
        let var = ((self.sumsq[k * self.slots + j] - n * m * m) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}

fn combine_pairwise(mut parts: Vec<Accum>) -> Accum {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(&b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

/// Deterministic parallel reduction of `member(index, &mut accum)` over
/// `n_runs` members.
fn reduce_members(
    n_runs: usize,
    rows: usize,
    slots: usize,
    member: impl Fn(usize, &mut Accum) -> Result<(), SimError> + Sync,
) -> Result<Accum, SimError> {
    let chunks = n_runs.div_ceil(CHUNK);
    let parts: Vec<Result<Accum, SimError>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accum::new(rows, slots);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_runs) {
                member(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(combine_pairwise(parts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSummary {
    pub name: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_runs: usize,
    pub master_seed: u64,
    pub times: Vec<f64>,
    /// Members still finite at each `k`.
    pub n_valid: Vec<usize>,
    pub mean: Vec<Vector>,
    pub mean_stderr: Vec<Vector>,
    /// Present when requested in [`StatsOptions`].
    pub cov: Option<Vec<Mat>>,
    pub functionals: Vec<FunctionalSummary>,
    /// Ensemble mean of `‖Im X‖`, complex mode only.
    pub imag_norm: Option<Vec<f64>>,
    pub diverged: usize,
}

impl EnsembleStats {
    pub fn functional(&self, name: &str) -> Option<&FunctionalSummary> {
        self.functionals.iter().find(|f| f.name == name)
    }

    /// CSV with header `t,stat_name,dim_index,value,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,stat_name,dim_index,value,stderr\n");
        for (k, &t) in self.times.iter().enumerate() {
            let _ = writeln!(out, "{t},n_valid,-1,{},", self.n_valid[k]);
            for i in 0..self.mean[k].len() {
                let _ = writeln!(out, "{t},mean,{i},{:e},{:e}", self.mean[k][i], self.mean_stderr[k][i]);
            }
            if let Some(cov) = &self.cov {
                let d = cov[k].nrows();
                for i in 0..d {
                    for j in 0..d {
                        let _ = writeln!(out, "{t},cov,{},{:e},", i * d + j, cov[k][(i, j)]);
                    }
                }
            }
            for f in &self.functionals {
                let _ = writeln!(out, "{t},{},-1,{:e},{:e}", f.name, f.mean[k], f.stderr[k]);
            }
            if let Some(im) = &self.imag_norm {
                let _ = writeln!(out, "{t},imag_norm,-1,{:e},", im[k]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOptions {
    pub covariance: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self { covariance: true }
    }
}

fn pair_slots(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (i..dim).map(move |j| (i, j))).collect()
}

/// Runs `n_runs` members of `runner` with streams `(master_seed, role, i)`.
pub fn mc_run(
    runner: &Runner,
    n_runs: usize,
    master_seed: u64,
    functionals: &[Functional],
    options: StatsOptions,
) -> Result<EnsembleStats, SimError> {
    if n_runs < 2 {
        return Err(SimError::InvalidConfig(format!("n_runs must be at least 2, got {n_runs}")));
    }
    runner.validate()?;
    let dim = runner.dim();
    let rows = runner.steps() + 1;
    let pairs = if options.covariance { pair_slots(dim) } else { Vec::new() };
    let complex = matches!(runner, Runner::Sde { model, .. } if model.mode == Mode::Complex);
    let slots = dim + pairs.len() + functionals.len() + usize::from(complex);
    let role = match runner {
        Runner::Sgd { .. } => ROLE_SGD,
        Runner::Sde { .. } => ROLE_SDE,
    };
    let acc = reduce_members(n_runs, rows, slots, |i, acc| {
        let mut rng = stream_rng(master_seed, role, i as u64);
        let mut row = vec![0.0; slots];
        let diverged = runner.run(&mut rng, 1, &mut |k, snaps| {
            row.iter_mut().for_each(|v| *v = 0.0);
            for s in snaps {
                let x = s.re;
                for d in 0..dim {
                    row[d] += s.weight * x[d];
                }
                for (p, &(a, b)) in pairs.iter().enumerate() {
                    row[dim + p] += s.weight * x[a] * x[b];
                }
                for (q, u) in functionals.iter().enumerate() {
                    row[dim + pairs.len() + q] += s.weight * (u.f)(x);
                }
                if complex {
                    row[slots - 1] += s.weight * s.im.map_or(0.0, |v| v.norm());
                }
            }
            acc.add_row(k, &row);
        })?;
        if diverged.is_some() {
            acc.diverged += 1;
        }
        Ok(())
    })?;

    let times: Vec<f64> = (0..rows).map(|k| k as f64 * runner.eta()).collect();
    let mean: Vec<Vector> = (0..rows).map(|k| Vector::from_fn(dim, |d, _| acc.mean(k, d))).collect();
    let mean_stderr = (0..rows).map(|k| Vector::from_fn(dim, |d, _| acc.stderr(k, d))).collect();
    let cov = options.covariance.then(|| {
        (0..rows)
            .map(|k| {
                let mut c = Mat::zeros(dim, dim);
                for (p, &(a, b)) in pairs.iter().enumerate() {
                    let v = acc.mean(k, dim + p) - mean[k][a] * mean[k][b];
                    c[(a, b)] = v;
                    c[(b, a)] = v;
                }
                c
            })
            .collect()
    });
    let base = dim + pairs.len();
    let functionals = functionals
        .iter()
        .enumerate()
        .map(|(q, u)| FunctionalSummary {
            name: u.name.clone(),
            mean: (0..rows).map(|k| acc.mean(k, base + q)).collect(),
            stderr: (0..rows).map(|k| acc.stderr(k, base + q)).collect(),
        })
        .collect();
    let imag_norm = complex.then(|| (0..rows).map(|k| acc.mean(k, slots - 1)).collect());
    Ok(EnsembleStats {
        n_runs,
        master_seed,
        times,
        n_valid: acc.count.iter().map(|&c| c as usize).collect(),
        mean,
        mean_stderr,
        cov,
        functionals,
        imag_norm,
        diverged: acc.diverged,
    })
}

/// How SGD and SDE members share randomness in [`weak_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Separate streams for SGD and the SDE.
    Independent,
    /// SGD noise at step `k` is the normalized sum of the SDE's Brownian
    /// increments over `[kη, (k+1)η]`. Each marginal law is unchanged, so the
    /// estimated weak error is the same quantity with lower variance.
    Synchronous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakErrorReport {
    pub eta: f64,
    pub n_runs: usize,
    pub sgd_mean: Vec<f64>,
    pub sde_mean: Vec<f64>,
    /// `Ê u(x_k) − Ê u(X(kη))`.
    pub diff: Vec<f64>,
    pub diff_stderr: Vec<f64>,
    pub max_error: f64,
    /// Standard error at the step attaining `max_error`.
    pub max_error_stderr: f64,
    pub argmax: usize,
    pub diverged: usize,
}

/// `max_{k ≤ K} |Ê u(x_k) − Ê u(X(kη))|` with per-step standard errors of the
/// difference.
pub fn weak_error(
    sgd: &Runner,
    sde: &Runner,
    u: &Functional,
    n_runs: usize,
    master_seed: u64,
    coupling: Coupling,
) -> Result<WeakErrorReport, SimError> {
    if !matches!(sgd, Runner::Sgd { .. }) || !matches!(sde, Runner::Sde { .. }) {
        return Err(SimError::InvalidConfig("weak_error expects an SGD runner and an SDE runner".into()));
    }
    if sgd.steps() != sde.steps() || (sgd.eta() - sde.eta()).abs() > 0.0 {
        return Err(SimError::InvalidConfig("SGD and SDE runners must share η and step count".into()));
    }
    if n_runs < 2 {
        return Err(SimError::InvalidConfig(format!("n_runs must be at least 2, got {n_runs}")));
    }
    sgd.validate()?;
    sde.validate()?;
    let rows = sgd.steps() + 1;
    let acc = reduce_members(n_runs, rows, 3, |i, acc| {
        let mut a = vec![f64::NAN; rows];
        let mut b = vec![f64::NAN; rows];
        let (mut rng_sgd, draws) = match coupling {
            Coupling::Independent => (stream_rng(master_seed, ROLE_SGD, i as u64), 1),
            Coupling::Synchronous => (stream_rng(master_seed, ROLE_SDE, i as u64), sde.substeps()),
        };
        let d1 = sgd.run(&mut rng_sgd, draws, &mut |k, s| a[k] = s.iter().map(|s| s.weight * (u.f)(s.re)).sum())?;
        let mut rng_sde = stream_rng(master_seed, ROLE_SDE, i as u64);
        let d2 = sde.run(&mut rng_sde, 1, &mut |k, s| b[k] = s.iter().map(|s| s.weight * (u.f)(s.re)).sum())?;
        if d1.is_some() || d2.is_some() {
            acc.diverged += 1;
        }
        for k in 0..rows {
            if a[k].is_finite() && b[k].is_finite() {
                acc.add_row(k, &[a[k], b[k], a[k] - b[k]]);
            }
        }
        Ok(())
    })?;
    let diff: Vec<f64> = (0..rows).map(|k| acc.mean(k, 2)).collect();
    let diff_stderr: Vec<f64> = (0..rows).map(|k| acc.stderr(k, 2)).collect();
    let (argmax, max_error) = diff
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bk, bv), (k, v)| if v.abs() > bv { (k, v.abs()) } else { (bk, bv) });
    Ok(WeakErrorReport {
        eta: sgd.eta(),
        n_runs,
        sgd_mean: (0..rows).map(|k| acc.mean(k, 0)).collect(),
        sde_mean: (0..rows).map(|k| acc.mean(k, 1)).collect(),
        max_error_stderr: diff_stderr[argmax],
        diff,
        diff_stderr,
        max_error,
        argmax,
        diverged: acc.diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares line through `(log η, log error)`. Each point is
/// `(η, error, stderr)`; points with `error < 3·stderr` are rejected.
pub fn weak_order_fit(points: &[(f64, f64, f64)]) -> Result<OrderFit, SimError> {
    if points.len() < 3 {
        return Err(SimError::InsufficientPoints(points.len()));
    }
    for &(eta, error, stderr) in points {
        if !(error > 0.0) || error < 3.0 * stderr {
            return Err(SimError::BelowNoiseFloor { eta, error, stderr });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(SimError::InvalidConfig("all step sizes are equal".into()));
    }
    let slope = sxy / sxx;
    Ok(OrderFit { slope, intercept: my - slope * mx })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_isotropic_noise, QuadraticObjective};
    use crate::proxies::{build_hasme, build_sme1};
    use crate::quadratic_analytics::{sgd_law, sme1_law};
    use rand::RngCore;

    fn quad(eigs: &[f64]) -> Arc<dyn Objective> {
        Arc::new(QuadraticObjective::diagonal(eigs))
    }

    fn iso(dim: usize, s2: f64) -> Arc<dyn NoiseModel> {
        Arc::new(make_isotropic_noise(dim, s2).unwrap())
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = stream_rng(7, ROLE_SGD, 0).next_u64();
        assert_eq!(a, stream_rng(7, ROLE_SGD, 0).next_u64());
        assert_ne!(a, stream_rng(7, ROLE_SGD, 1).next_u64());
        assert_ne!(a, stream_rng(7, ROLE_SDE, 0).next_u64());
        assert_ne!(a, stream_rng(8, ROLE_SGD, 0).next_u64());
    }

    #[test]
    fn noiseless_sgd_is_gradient_descent() {
        let obj = QuadraticObjective::diagonal(&[1.0, -0.5]);
        let noise = make_isotropic_noise(2, 0.0).unwrap();
        let x0 = Vector::from_vec(vec![1.0, 2.0]);
        let tr = run_sgd(&obj, &noise, 0.3, &x0, 5, &mut stream_rng(0, 1, 0));
        for (k, x) in tr.states.iter().enumerate() {
            assert_eq!(x[0], (0..k).fold(1.0, |v, _| v - 0.3 * v));
        }
        assert_eq!(tr.times.len(), 6);
        assert!(tr.diverged_at.is_none());
    }

    #[test]
    fn sgd_divergence_is_reported() {
        let obj = QuadraticObjective::diagonal(&[1.0]);
        let noise = make_isotropic_noise(1, 0.0).unwrap();
        let tr = run_sgd(&obj, &noise, 1e10, &Vector::from_element(1, 1e300), 50, &mut stream_rng(0, 1, 0));
        assert!(tr.diverged_at.is_some());
        assert!(tr.states.iter().all(all_finite));
    }

    #[test]
    fn deterministic_em_converges_at_first_order() {
        let model = build_sme1(quad(&[1.0]), iso(1, 0.0), 0.5).unwrap();
        let x0 = Vector::from_element(1, 1.0);
        let exact = (-1.0f64).exp();
        let err = |m: usize| {
            let tr = euler_maruyama(&model, &x0, 1.0, m, &mut stream_rng(0, 2, 0)).unwrap();
            (tr.states[2][0] - exact).abs()
        };
        let (e1, e2) = (err(10), err(20));
        assert!((e1 / e2 - 2.0).abs() < 0.1, "{e1} {e2}");
        assert!(euler_maruyama(&model, &x0, 0.7, 4, &mut stream_rng(0, 2, 0)).is_err());
    }

    #[test]
    fn richardson_removes_first_order_bias() {
        let model = build_sme1(quad(&[1.0]), iso(1, 0.0), 0.5).unwrap();
        let x0 = Vector::from_element(1, 1.0);
        let mut last = 0.0;
        integrate_path(&model, &x0, 2, 10, true, &mut stream_rng(0, 2, 0), |k, s| {
            if k == 2 {
                last = s.iter().map(|s| s.weight * s.re[0]).sum();
            }
        })
        .unwrap();
        assert!((last - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn ensemble_matches_sgd_law() {
        let obj = quad(&[1.0, 1.0]);
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let runner = Runner::Sgd { obj, noise: iso(2, 1.0), eta: 2.1, x0: x0.clone(), steps: 10 };
        let stats = mc_run(&runner, 2000, 3, &[], StatsOptions::default()).unwrap();
        for k in 0..=10 {
            let law = sgd_law(&Mat::identity(2, 2), &Mat::identity(2, 2), 2.1, &x0, k).unwrap();
            for d in 0..2 {
                let z = (stats.mean[k][d] - law.mean[d]).abs();
                assert!(z <= 3.0 * stats.mean_stderr[k][d] + 1e-12, "k={k} {z}");
            }
        }
    }

    #[test]
    fn em_ou_covariance_matches_law() {
        let eta = 0.1;
        let model = build_sme1(quad(&[1.0]), iso(1, 1.0), eta).unwrap();
        let x0 = Vector::zeros(1);
        let runner = Runner::Sde { model, x0: x0.clone(), steps: 10, substeps: 20, richardson: false };
        let stats = mc_run(&runner, 20_000, 11, &[], StatsOptions::default()).unwrap();
        let law = sme1_law(&Mat::identity(1, 1), 1.0, eta, &x0, 1.0).unwrap();
        let var = stats.cov.as_ref().unwrap()[10][(0, 0)];
        // standard error of a sample variance of a Gaussian is ≈ v·√(2/n)
        let se = law.cov[(0, 0)] * (2.0 / 20_000f64).sqrt();
        assert!((var - law.cov[(0, 0)]).abs() <= 3.0 * se + 0.01 * law.cov[(0, 0)]);
    }

    #[test]
    fn complex_em_tracks_sgd_mean() {
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let model = build_hasme(quad(&[1.0, -1.0]), iso(2, 1.0), 2.1, Mode::Complex, &x0).unwrap();
        let runner = Runner::Sde { model, x0: x0.clone(), steps: 3, substeps: 200, richardson: true };
        let stats = mc_run(&runner, 400, 5, &[], StatsOptions { covariance: false }).unwrap();
        let law = sgd_law(&Mat::from_diagonal(&Vector::from_vec(vec![1.0, -1.0])), &Mat::identity(2, 2), 2.1, &x0, 3).unwrap();
        for d in 0..2 {
            assert!((stats.mean[3][d] - law.mean[d]).abs() <= 3.0 * stats.mean_stderr[3][d] + 1e-3 * law.mean[d].abs());
        }
        assert!(stats.imag_norm.is_some());
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let runner = Runner::Sgd { obj: quad(&[1.0, 0.5]), noise: iso(2, 1.0), eta: 0.1, x0: Vector::zeros(2), steps: 5 };
        let f = [Functional::coordinate(0)];
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| mc_run(&runner, 100, 9, &f, StatsOptions::default()).unwrap());
        let b = three.install(|| mc_run(&runner, 100, 9, &f, StatsOptions::default()).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn stderr_shrinks_like_root_n() {
        let runner = Runner::Sgd { obj: quad(&[1.0]), noise: iso(1, 1.0), eta: 0.1, x0: Vector::zeros(1), steps: 3 };
        let a = mc_run(&runner, 4000, 1, &[], StatsOptions::default()).unwrap();
        let b = mc_run(&runner, 8000, 1, &[], StatsOptions::default()).unwrap();
        let ratio = a.mean_stderr[3][0] / b.mean_stderr[3][0];
        assert!((ratio / std::f64::consts::SQRT_2 - 1.0).abs() < 0.2);
    }

    #[test]
    fn weak_error_of_sgd_against_itself_is_zero_when_coupled() {
        // an SDE whose single substep reproduces SGD: SME-1 on a quadratic with
        // one substep per η is exactly SGD under synchronous coupling
        let obj = quad(&[1.0, 0.3]);
        let noise = iso(2, 0.5);
        let x0 = Vector::from_vec(vec![1.0, -1.0]);
        let model = build_sme1(obj.clone(), noise.clone(), 0.2).unwrap();
        let sgd = Runner::Sgd { obj: obj.clone(), noise, eta: 0.2, x0: x0.clone(), steps: 6 };
        let sde = Runner::Sde { model, x0, steps: 6, substeps: 1, richardson: false };
        let r = weak_error(&sgd, &sde, &Functional::objective(obj), 50, 3, Coupling::Synchronous).unwrap();
        assert!(r.max_error < 1e-12, "{r:?}");
    }

    #[test]
    fn order_fit_on_synthetic_data() {
        let pts = |p: i32| -> Vec<(f64, f64, f64)> { [0.1f64, 0.05, 0.025].iter().map(|&e| (e, 3.0 * e.powi(p), 0.0)).collect() };
        assert!((weak_order_fit(&pts(2)).unwrap().slope - 2.0).abs() < 0.01);
        assert!((weak_order_fit(&pts(1)).unwrap().slope - 1.0).abs() < 0.01);
        assert!(matches!(weak_order_fit(&pts(1)[..2]), Err(SimError::InsufficientPoints(2))));
        let noisy = vec![(0.1, 1.0, 0.1), (0.05, 0.5, 0.1), (0.025, 0.2, 0.1)];
        assert!(matches!(weak_order_fit(&noisy), Err(SimError::BelowNoiseFloor { .. })));
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let runner = Runner::Sgd { obj: quad(&[1.0]), noise: iso(1, 0.0), eta: 0.1, x0: Vector::from_element(1, 1.0), steps: 3 };
        let s = mc_run(&runner, 2, 0, &[], StatsOptions::default()).unwrap();
        assert_eq!(s.mean_stderr[3][0], 0.0);
        assert!(mc_run(&runner, 1, 0, &[], StatsOptions::default()).is_err());
    }
}
