//! SGD and three SDE proxies escaping (or not) from the stationary point of
//! a two-dimensional quadratic at a large step size.

use super::{vector, Model, Outcome};
use crate::config::ExperimentConfig;
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::linalg::{Mat, Vector};
use sgdsde_core::problems::{make_isotropic_noise, NoiseModel, Objective, QuadraticObjective};
use sgdsde_core::proxies::{build, Mode, ProxyKind};
use sgdsde_core::quadratic_analytics::{hasme_law_quadratic, sgd_law, sme1_law, sme2_law, GaussianLaw};
use sgdsde_core::simulate::{mc_run, Functional, Runner, StatsOptions};
use std::fmt::Write;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fig1Variant {
    /// `f = ½(x² − y²)`
    Saddle,
    /// `f = ½(x² + y²)`
    Minimum,
}

impl Fig1Variant {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "saddle" => Ok(Self::Saddle),
            "minimum" => Ok(Self::Minimum),
            _ => Err(invalid(format!("fig1 variant must be saddle or minimum, got {s:?}"))),
        }
    }

    pub fn hessian(self) -> Mat {
        let y = match self {
            Self::Saddle => -1.0,
            Self::Minimum => 1.0,
        };
        Mat::from_diagonal(&vector(&[1.0, y]))
    }
}

pub const STATS: [&str; 4] = ["mean_x", "mean_y", "second_y", "f"];

#[derive(Debug, Clone, Serialize)]
pub struct Fig1Settings {
    pub variant: Fig1Variant,
    pub eta: f64,
    pub sigma2: f64,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub n_runs: usize,
    pub substeps: usize,
    pub richardson: bool,
    pub seed: u64,
}

impl Fig1Settings {
    pub fn new(variant: Fig1Variant) -> Self {
        Self {
            variant,
            eta: 2.1,
            sigma2: 1.0,
            x0: vec![1.0, 1.0],
            steps: 6,
            n_runs: 1000,
            substeps: 200,
            richardson: true,
            seed: 0,
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let variant = Fig1Variant::parse(cfg.variant.as_deref().unwrap_or("saddle"))?;
        if cfg.objective.is_some() || cfg.noise.as_ref().is_some_and(|n| n.cov.is_some()) {
            return Err(invalid("fig1 fixes its objective and uses isotropic noise (noise.sigma2 only)"));
        }
        let mut s = Self::new(variant);
        s.eta = cfg.eta.unwrap_or(s.eta);
        s.sigma2 = cfg.noise_spec().isotropic_variance().unwrap_or(s.sigma2);
        s.x0 = cfg.x0.clone().unwrap_or(s.x0);
        if s.x0.len() != 2 {
            return Err(invalid("fig1 x0 must have two entries"));
        }
        s.steps = cfg.steps_for(s.eta, s.steps);
        s.n_runs = cfg.n_runs.unwrap_or(s.n_runs);
        s.substeps = cfg.substeps_per_eta.unwrap_or(s.substeps);
        s.richardson = cfg.richardson.unwrap_or(s.richardson);
        s.seed = cfg.master_seed.unwrap_or(s.seed);
        if cfg.models.is_some() {
            return Err(invalid("fig1 always runs SGD, SME-1, SME-2 and HA-SME"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig1Row {
    pub model: &'static str,
    pub k: usize,
    pub t: f64,
    pub stat: &'static str,
    pub mc: f64,
    pub stderr: f64,
    pub analytic: f64,
}

impl Fig1Row {
    /// `(mc − analytic)/stderr`, zero when both agree exactly.
    pub fn z_score(&self) -> f64 {
        let d = self.mc - self.analytic;
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig1Report {
    pub settings: Fig1Settings,
    pub rows: Vec<Fig1Row>,
    /// Largest `|z|` over all rows at the final step.
    pub max_abs_z_final: f64,
}

impl Fig1Report {
    pub fn row(&self, model: &str, k: usize, stat: &str) -> Option<&Fig1Row> {
        self.rows.iter().find(|r| r.model == model && r.k == k && r.stat == stat)
    }

    /// Columns `model,k,t,stat,mc,stderr,analytic`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,k,t,stat,mc,stderr,analytic\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:e},{:e},{:e}", r.model, r.k, r.t, r.stat, r.mc, r.stderr, r.analytic);
        }
        out
    }

    pub fn outcome(&self) -> CliResult<Outcome> {
        Outcome::new("fig1", Some(self.settings.seed), self.to_csv(), self)
    }
}

fn analytic_stat(law: &GaussianLaw, a: &Mat, stat: &str) -> f64 {
    match stat {
        "mean_x" => law.mean[0],
        "mean_y" => law.mean[1],
        "second_y" => law.cov[(1, 1)] + law.mean[1] * law.mean[1],
        _ => law.expected_quadratic(a),
    }
}

pub fn run_fig1(s: &Fig1Settings) -> CliResult<Fig1Report> {
    let a = s.variant.hessian();
    let obj: Arc<dyn Objective> = Arc::new(QuadraticObjective::new(a.clone())?);
    let noise: Arc<dyn NoiseModel> = Arc::new(make_isotropic_noise(2, s.sigma2)?);
    let sigma = Mat::identity(2, 2) * s.sigma2;
    let x0 = Vector::from_column_slice(&s.x0);
    let f_obj = obj.clone();
    let functionals = [
        Functional::new("mean_x", |x| x[0]),
        Functional::new("mean_y", |x| x[1]),
        Functional::new("second_y", |x| x[1] * x[1]),
        Functional::new("f", move |x| f_obj.value(x)),
    ];

    let models = [Model::Sgd, Model::Proxy(ProxyKind::Sme1), Model::Proxy(ProxyKind::Sme2), Model::Proxy(ProxyKind::HaSme)];
    let mut rows = Vec::new();
    for model in models {
        let runner = match model {
            Model::Sgd => Runner::Sgd { obj: obj.clone(), noise: noise.clone(), eta: s.eta, x0: x0.clone(), steps: s.steps },
            Model::Proxy(kind) => {
                let mode = if kind == ProxyKind::HaSme { Mode::Complex } else { Mode::Real };
                let m = build(kind, obj.clone(), noise.clone(), s.eta, mode, &x0)?;
                Runner::Sde { model: m, x0: x0.clone(), steps: s.steps, substeps: s.substeps, richardson: s.richardson }
            }
        };
        let stats = mc_run(&runner, s.n_runs, s.seed, &functionals, StatsOptions { covariance: false })?;
        for k in 0..=s.steps {
            let t = k as f64 * s.eta;
            let law = match model {
                Model::Sgd => sgd_law(&a, &sigma, s.eta, &x0, k)?,
                Model::Proxy(ProxyKind::Sme1) => sme1_law(&a, s.sigma2, s.eta, &x0, t)?,
                Model::Proxy(ProxyKind::Sme2) => sme2_law(&a, s.sigma2, s.eta, &x0, t)?,
                Model::Proxy(_) => hasme_law_quadratic(&a, &sigma, s.eta, &x0, k)?.complex.real_part(),
            };
            for stat in STATS {
                let f = stats.functional(stat).expect("functional was registered");
                rows.push(Fig1Row {
                    model: model.name(),
                    k,
                    t,
                    stat,
                    mc: f.mean[k],
                    stderr: f.stderr[k],
                    analytic: analytic_stat(&law, &a, stat),
                });
            }
        }
    }
    let max_abs_z_final = rows.iter().filter(|r| r.k == s.steps).map(|r| r.z_score().abs()).fold(0.0, f64::max);
    Ok(Fig1Report { settings: s.clone(), rows, max_abs_z_final })
}

/// Stationary second moment `ησ²/(2λ + ηλ²)` of the SME-2 mode with
/// eigenvalue `λ`, when `λ + ηλ²/2 > 0`.
pub fn sme2_stationary_second_moment(lambda: f64, sigma2: f64, eta: f64) -> Option<f64> {
    let rate = 2.0 * lambda + eta * lambda * lambda;
    (rate > 0.0).then(|| eta * sigma2 / rate)
}
