//! Weak error against SGD over a step-size ladder and the fitted order.

use super::{build_noise, build_objective, models_or, x0_or, Model, Outcome};
use crate::config::ExperimentConfig;
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::linalg::Vector;
use sgdsde_core::problems::{NoiseModel, Objective};
use sgdsde_core::proxies::{build, Mode, ProxyKind};
use sgdsde_core::simulate::{weak_error, weak_order_fit, Coupling, Functional, Runner};
use std::fmt::Write;
use std::sync::Arc;

#[derive(Clone, Serialize)]
pub struct WeakOrderSettings {
    #[serde(skip)]
    pub objective: Arc<dyn Objective>,
    #[serde(skip)]
    pub noise: Arc<dyn NoiseModel>,
    pub objective_name: String,
    pub x0: Vec<f64>,
    pub etas: Vec<f64>,
    pub horizon: f64,
    pub n_runs: usize,
    pub substeps: usize,
    pub richardson: bool,
    pub seed: u64,
    pub synchronous: bool,
    #[serde(skip)]
    pub models: Vec<Model>,
}

impl std::fmt::Debug for WeakOrderSettings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeakOrderSettings")
            .field("objective", &self.objective_name)
            .field("etas", &self.etas)
            .field("n_runs", &self.n_runs)
            .finish_non_exhaustive()
    }
}

impl WeakOrderSettings {
    /// Cosine-coupled objective from `(1.2, −0.8)`, `Σ = 0.01 I`, `T = 0.4`.
    pub fn cosine_default() -> CliResult<Self> {
        Self::from_config(&ExperimentConfig::default())
    }

    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let spec = cfg.objective_spec();
        let objective = build_objective(&spec, "cosine")?;
        let dim = objective.dim();
        let noise = build_noise(&cfg.noise_spec(), dim, 0.01)?;
        let default_x0: Vec<f64> = if dim == 2 { vec![1.2, -0.8] } else { vec![0.5; dim] };
        let x0 = x0_or(cfg, &default_x0, dim)?;
        let models = models_or(cfg, &[Model::Proxy(ProxyKind::Sme1), Model::Proxy(ProxyKind::HaSme)])?;
        if models.contains(&Model::Sgd) {
            return Err(invalid("weak-order compares SDE models against SGD; do not list sgd"));
        }
        if cfg.steps.is_some() {
            return Err(invalid("weak-order uses a fixed horizon over several step sizes; set horizon, not steps"));
        }
        Ok(Self {
            objective,
            noise,
            objective_name: spec.kind.unwrap_or_else(|| "cosine".into()),
            x0: x0.iter().copied().collect(),
            etas: cfg.etas.clone().unwrap_or_else(|| vec![0.04, 0.02, 0.01]),
            horizon: cfg.horizon.unwrap_or(0.4),
            n_runs: cfg.n_runs.unwrap_or(100_000),
            substeps: cfg.substeps_per_eta.unwrap_or(4),
            richardson: cfg.richardson.unwrap_or(true),
            seed: cfg.master_seed.unwrap_or(1),
            synchronous: true,
            models,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakOrderPoint {
    pub model: &'static str,
    pub eta: f64,
    pub steps: usize,
    pub max_error: f64,
    pub stderr: f64,
    pub argmax: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakOrderFit {
    pub model: &'static str,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Why the fit was rejected, e.g. an error below the noise floor.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakOrderReport {
    pub settings: WeakOrderSettings,
    pub points: Vec<WeakOrderPoint>,
    pub fits: Vec<WeakOrderFit>,
}

impl WeakOrderReport {
    pub fn fit(&self, model: &str) -> Option<&WeakOrderFit> {
        self.fits.iter().find(|f| f.model == model)
    }

    pub fn points_for<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a WeakOrderPoint> + 'a {
        self.points.iter().filter(move |p| p.model == model)
    }

    /// Columns `model,eta,steps,max_error,stderr,argmax`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,eta,steps,max_error,stderr,argmax\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{:e},{:e},{}", p.model, p.eta, p.steps, p.max_error, p.stderr, p.argmax);
        }
        out
    }

    pub fn outcome(&self) -> CliResult<Outcome> {
        let mut out = Outcome::new("weak_order", Some(self.settings.seed), self.to_csv(), self)?;
        out.failure = self.fits.iter().find_map(|f| f.failure.as_ref().map(|m| format!("{}: {m}", f.model)));
        Ok(out)
    }
}

pub fn run_weak_order(s: &WeakOrderSettings) -> CliResult<WeakOrderReport> {
    if s.etas.len() < 3 {
        return Err(invalid("weak-order needs at least three step sizes"));
    }
    let x0 = Vector::from_column_slice(&s.x0);
    let u = Functional::objective(s.objective.clone());
    let coupling = if s.synchronous { Coupling::Synchronous } else { Coupling::Independent };
    let mut points = Vec::new();
    let mut fits = Vec::new();
    for &model in &s.models {
        let Model::Proxy(kind) = model else { unreachable!("validated in from_config") };
        let mut fit_points = Vec::new();
        for &eta in &s.etas {
            let steps = (s.horizon / eta).round() as usize;
            if steps == 0 {
                return Err(invalid(format!("horizon {} is shorter than η = {eta}", s.horizon)));
            }
            let sgd = Runner::Sgd { obj: s.objective.clone(), noise: s.noise.clone(), eta, x0: x0.clone(), steps };
            let m = build(kind, s.objective.clone(), s.noise.clone(), eta, Mode::Real, &x0)?;
            let sde = Runner::Sde { model: m, x0: x0.clone(), steps, substeps: s.substeps, richardson: s.richardson };
            let r = weak_error(&sgd, &sde, &u, s.n_runs, s.seed, coupling)?;
            fit_points.push((eta, r.max_error, r.max_error_stderr));
            points.push(WeakOrderPoint {
                model: model.name(),
                eta,
                steps,
                max_error: r.max_error,
                stderr: r.max_error_stderr,
                argmax: r.argmax,
            });
        }
        fits.push(match weak_order_fit(&fit_points) {
            Ok(f) => WeakOrderFit { model: model.name(), slope: Some(f.slope), intercept: Some(f.intercept), failure: None },
            Err(e) => WeakOrderFit { model: model.name(), slope: None, intercept: None, failure: Some(e.to_string()) },
        });
    }
    Ok(WeakOrderReport { settings: s.clone(), points, fits })
}
