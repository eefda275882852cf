//! Weak error of SME-1, SME-2 and HA-SME against SGD on the Iris MLP.

use super::{build_noise, models_or, Model, Outcome};
use crate::config::{ExperimentConfig, NoiseSpec};
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::problems::{load_iris, MlpClassifier, Objective};
use sgdsde_core::proxies::{build, Evaluator, Mode, ProxyKind};
use sgdsde_core::simulate::{weak_error, Coupling, Functional, Runner, WeakErrorReport};
use std::fmt::Write;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize)]
pub struct Table1Settings {
    pub eta: f64,
    /// Noise standard deviation; `Σ = σ²I`.
    pub sigma: f64,
    pub data: PathBuf,
    pub init_seed: u64,
    pub steps: usize,
    pub n_runs: usize,
    pub substeps: usize,
    pub richardson: bool,
    pub seed: u64,
    pub synchronous: bool,
    #[serde(skip)]
    pub models: Vec<Model>,
}

impl Table1Settings {
    pub fn new(eta: f64, sigma: f64, data: impl Into<PathBuf>) -> Self {
        Self {
            eta,
            sigma,
            data: data.into(),
            init_seed: 0,
            steps: 10,
            n_runs: 100,
            substeps: 20,
            richardson: true,
            seed: 1,
            synchronous: true,
            models: vec![Model::Proxy(ProxyKind::Sme1), Model::Proxy(ProxyKind::Sme2), Model::Proxy(ProxyKind::HaSme)],
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let obj = cfg.objective_spec();
        if obj.kind.as_deref().is_some_and(|k| k != "mlp") {
            return Err(invalid("table1 runs on the mlp objective"));
        }
        let noise = cfg.noise_spec();
        if noise.cov.is_some() {
            return Err(invalid("table1 uses isotropic noise: set noise.sigma or noise.sigma2"));
        }
        let sigma = noise.isotropic_variance().map(f64::sqrt).unwrap_or(1e-2);
        let mut s = Self::new(cfg.eta.unwrap_or(0.5), sigma, obj.data.unwrap_or_else(|| "data/iris.csv".into()));
        s.init_seed = obj.init_seed.unwrap_or(s.init_seed);
        s.steps = cfg.steps_for(s.eta, s.steps);
        s.n_runs = cfg.n_runs.unwrap_or(s.n_runs);
        s.substeps = cfg.substeps_per_eta.unwrap_or(s.substeps);
        s.richardson = cfg.richardson.unwrap_or(s.richardson);
        s.seed = cfg.master_seed.unwrap_or(s.seed);
        s.models = models_or(cfg, &s.models)?;
        if s.models.contains(&Model::Sgd) {
            return Err(invalid("table1 compares SDE models against SGD; do not list sgd"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Row {
    pub model: &'static str,
    pub max_error: f64,
    pub stderr: f64,
    pub argmax: usize,
    pub diverged: usize,
    #[serde(skip)]
    pub report: WeakErrorReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Report {
    pub settings: Table1Settings,
    pub rows: Vec<Table1Row>,
}

impl Table1Report {
    pub fn row(&self, model: &str) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Columns `model,k,t,sgd_mean,sde_mean,diff,diff_stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,k,t,sgd_mean,sde_mean,diff,diff_stderr\n");
        for row in &self.rows {
            let r = &row.report;
            for k in 0..r.diff.len() {
                let _ = writeln!(
                    out,
                    "{},{k},{},{:e},{:e},{:e},{:e}",
                    row.model,
                    k as f64 * r.eta,
                    r.sgd_mean[k],
                    r.sde_mean[k],
                    r.diff[k],
                    r.diff_stderr[k]
                );
            }
        }
        out
    }

    pub fn outcome(&self) -> CliResult<Outcome> {
        Outcome::new("table1", Some(self.settings.seed), self.to_csv(), self)
    }
}

pub fn run_table1(s: &Table1Settings) -> CliResult<Table1Report> {
    let mlp = Arc::new(MlpClassifier::iris(load_iris(&s.data)?));
    let x0 = mlp.init_params(s.init_seed);
    let obj: Arc<dyn Objective> = mlp;
    let noise = build_noise(&NoiseSpec { sigma: Some(s.sigma), ..Default::default() }, obj.dim(), 0.0)?;
    let sgd = Runner::Sgd { obj: obj.clone(), noise: noise.clone(), eta: s.eta, x0: x0.clone(), steps: s.steps };
    let u = Functional::objective(obj.clone());
    let coupling = if s.synchronous { Coupling::Synchronous } else { Coupling::Independent };
    let mut rows = Vec::new();
    for &model in &s.models {
        let Model::Proxy(kind) = model else { unreachable!("validated in from_config") };
        let mut m = build(kind, obj.clone(), noise.clone(), s.eta, Mode::Real, &x0)?;
        if kind == ProxyKind::HaSme || kind == ProxyKind::Spf {
            // Hessian functions through Lanczos on exact Hessian-vector products
            m = m.with_evaluator(Evaluator::KRYLOV_DEFAULT)?;
        }
        let sde = Runner::Sde { model: m, x0: x0.clone(), steps: s.steps, substeps: s.substeps, richardson: s.richardson };
        let report = weak_error(&sgd, &sde, &u, s.n_runs, s.seed, coupling)?;
        rows.push(Table1Row {
            model: model.name(),
            max_error: report.max_error,
            stderr: report.max_error_stderr,
            argmax: report.argmax,
            diverged: report.diverged,
            report,
        });
    }
    Ok(Table1Report { settings: s.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> PathBuf {
        PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/iris.csv"))
    }

    #[test]
    fn short_run() {
        let mut s = Table1Settings::new(0.1, 1e-3, data());
        s.steps = 2;
        s.n_runs = 4;
        s.models = vec![Model::Proxy(ProxyKind::Sme1)];
        let r = run_table1(&s).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].max_error.is_finite());
        assert_eq!(r.to_csv().lines().count(), 1 + 3);
    }

    #[test]
    fn missing_data_is_a_validation_error() {
        let s = Table1Settings::new(0.1, 1e-3, "/no/such/iris.csv");
        assert_eq!(run_table1(&s).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn config_reads_sigma() {
        let cfg = ExperimentConfig::from_toml("eta = 0.2\nnoise.sigma = 0.001\nobjective.kind = \"mlp\"").unwrap();
        let s = Table1Settings::from_config(&cfg).unwrap();
        assert!((s.sigma - 1e-3).abs() < 1e-15);
        assert!(Table1Settings::from_config(&ExperimentConfig::from_toml("models = [\"sgd\"]").unwrap()).is_err());
    }
}
