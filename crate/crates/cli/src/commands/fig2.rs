//! SGD, SPF and HA-SME on the bimodal piecewise quadratic, started in the
//! shallow basin.

use super::{models_or, Model, Outcome};
use crate::config::ExperimentConfig;
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::linalg::Vector;
use sgdsde_core::problems::{make_isotropic_noise, BimodalPiecewise, NoiseModel, Objective};
use sgdsde_core::proxies::{build, Mode, ProxyKind};
use sgdsde_core::simulate::{mc_run, Functional, Runner, StatsOptions};
use std::fmt::Write;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Settings {
    pub eta: f64,
    pub sigma2: f64,
    pub x0: f64,
    pub steps: usize,
    pub n_runs: usize,
    pub substeps: usize,
    pub richardson: bool,
    pub seed: u64,
    /// Trailing steps averaged into the late-time mean.
    pub tail: usize,
    #[serde(skip)]
    pub models: Vec<Model>,
}

impl Default for Fig2Settings {
    fn default() -> Self {
        Self {
            eta: 0.999,
            sigma2: 1.0,
            x0: 0.0,
            steps: 200,
            n_runs: 100,
            substeps: 20,
            richardson: true,
            seed: 0,
            tail: 20,
            models: vec![Model::Sgd, Model::Proxy(ProxyKind::Spf), Model::Proxy(ProxyKind::HaSme)],
        }
    }
}

impl Fig2Settings {
    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        if cfg.objective.is_some() || cfg.noise.as_ref().is_some_and(|n| n.cov.is_some()) {
            return Err(invalid("fig2 fixes its objective and uses scalar noise (noise.sigma2 only)"));
        }
        let mut s = Self::default();
        s.eta = cfg.eta.unwrap_or(s.eta);
        s.sigma2 = cfg.noise_spec().isotropic_variance().unwrap_or(s.sigma2);
        if let Some(x0) = &cfg.x0 {
            match x0.as_slice() {
                [v] => s.x0 = *v,
                _ => return Err(invalid("fig2 x0 must have one entry")),
            }
        }
        s.steps = cfg.steps_for(s.eta, s.steps);
        s.n_runs = cfg.n_runs.unwrap_or(s.n_runs);
        s.substeps = cfg.substeps_per_eta.unwrap_or(s.substeps);
        s.richardson = cfg.richardson.unwrap_or(s.richardson);
        s.seed = cfg.master_seed.unwrap_or(s.seed);
        s.models = models_or(cfg, &s.models)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Series {
    pub model: &'static str,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub late_mean: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub settings: Fig2Settings,
    pub series: Vec<Fig2Series>,
}

impl Fig2Report {
    pub fn late_mean(&self, model: &str) -> Option<f64> {
        self.series.iter().find(|s| s.model == model).map(|s| s.late_mean)
    }

    /// Columns `model,k,t,mean_x,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,k,t,mean_x,stderr\n");
        for s in &self.series {
            for (k, (m, e)) in s.mean.iter().zip(&s.stderr).enumerate() {
                let _ = writeln!(out, "{},{k},{},{m:e},{e:e}", s.model, k as f64 * self.settings.eta);
            }
        }
        out
    }

    pub fn outcome(&self) -> CliResult<Outcome> {
        #[derive(Serialize)]
        struct Summary<'a> {
            settings: &'a Fig2Settings,
            late_means: Vec<(&'static str, f64)>,
        }
        let summary = Summary { settings: &self.settings, late_means: self.series.iter().map(|s| (s.model, s.late_mean)).collect() };
        Outcome::new("fig2", Some(self.settings.seed), self.to_csv(), &summary)
    }
}

pub fn run_fig2(s: &Fig2Settings) -> CliResult<Fig2Report> {
    if s.tail == 0 || s.tail > s.steps + 1 {
        return Err(invalid(format!("tail must be in 1..={}", s.steps + 1)));
    }
    let obj: Arc<dyn Objective> = Arc::new(BimodalPiecewise);
    let noise: Arc<dyn NoiseModel> = Arc::new(make_isotropic_noise(1, s.sigma2)?);
    let x0 = Vector::from_element(1, s.x0);
    let mut series = Vec::new();
    for &model in &s.models {
        let runner = match model {
            Model::Sgd => Runner::Sgd { obj: obj.clone(), noise: noise.clone(), eta: s.eta, x0: x0.clone(), steps: s.steps },
            Model::Proxy(kind) => Runner::Sde {
                model: build(kind, obj.clone(), noise.clone(), s.eta, Mode::Real, &x0)?,
                x0: x0.clone(),
                steps: s.steps,
                substeps: s.substeps,
                richardson: s.richardson,
            },
        };
        let stats = mc_run(&runner, s.n_runs, s.seed, &[Functional::coordinate(0)], StatsOptions { covariance: false })?;
        let f = &stats.functionals[0];
        let tail = &f.mean[f.mean.len() - s.tail..];
        series.push(Fig2Series {
            model: model.name(),
            late_mean: tail.iter().sum::<f64>() / s.tail as f64,
            mean: f.mean.clone(),
            stderr: f.stderr.clone(),
            diverged: stats.diverged,
        });
    }
    Ok(Fig2Report { settings: s.clone(), series })
}
