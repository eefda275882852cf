pub mod coeff;
pub mod escape;
pub mod fig1;
pub mod fig2;
pub mod quad_match;
pub mod table1;
pub mod weak_order;

use crate::config::{ExperimentConfig, NoiseSpec, ObjectiveSpec};
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::linalg::{Mat, Vector};
use sgdsde_core::problems::{
    load_iris, make_isotropic_noise, BimodalPiecewise, ConstantNoise, CosineCoupled, MlpClassifier, NoiseModel, Objective,
    QuadraticObjective,
};
use sgdsde_core::proxies::ProxyKind;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Result of one command: the CSV body and a JSON summary.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: &'static str,
    pub seed: Option<u64>,
    pub csv: String,
    pub summary: serde_json::Value,
    /// Set when the run completed but a numerical check failed.
    pub failure: Option<String>,
}

impl Outcome {
    pub fn new(command: &'static str, seed: Option<u64>, csv: String, summary: &impl Serialize) -> CliResult<Self> {
        let summary = serde_json::to_value(summary).map_err(|e| invalid(format!("summary: {e}")))?;
        Ok(Self { command, seed, csv, summary, failure: None })
    }
}

#[derive(Debug, Serialize)]
struct Tolerances {
    match_tol: f64,
    psd_tol: f64,
    quad_tol: f64,
    removable_threshold: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: &'a ExperimentConfig,
    tolerances: Tolerances,
    csv: String,
    summary: &'a serde_json::Value,
}

/// Writes `<dir>/<command>.csv` and `<dir>/<command>.json`.
pub fn write_outputs(dir: &Path, outcome: &Outcome, config: &ExperimentConfig) -> CliResult<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", outcome.command));
    let json_path = dir.join(format!("{}.json", outcome.command));
    std::fs::write(&csv_path, &outcome.csv)?;
    let manifest = Manifest {
        command: outcome.command,
        version: env!("CARGO_PKG_VERSION"),
        seed: outcome.seed,
        config,
        tolerances: Tolerances {
            match_tol: sgdsde_core::quadratic_analytics::MATCH_TOL,
            psd_tol: sgdsde_core::proxies::PSD_TOL,
            quad_tol: sgdsde_core::escape::DEFAULT_QUAD_TOL,
            removable_threshold: sgdsde_core::coefficients::REMOVABLE_THRESHOLD,
        },
        csv: format!("{}.csv", outcome.command),
        summary: &outcome.summary,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(format!("manifest: {e}")))?;
    std::fs::write(&json_path, text + "\n")?;
    Ok((csv_path, json_path))
}

/// SGD or one of the SDE proxies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Sgd,
    Proxy(ProxyKind),
}

impl Model {
    pub fn parse(name: &str) -> CliResult<Self> {
        Ok(match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sgd" => Model::Sgd,
            "sme1" => Model::Proxy(ProxyKind::Sme1),
            "sme2" => Model::Proxy(ProxyKind::Sme2),
            "spf" => Model::Proxy(ProxyKind::Spf),
            "hasme" => Model::Proxy(ProxyKind::HaSme),
            _ => return Err(invalid(format!("unknown model {name:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Sgd => "sgd",
            Model::Proxy(k) => k.name(),
        }
    }
}

pub(crate) fn matrix(rows: &[Vec<f64>], what: &str) -> CliResult<Mat> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(invalid(format!("{what} must be a non-empty square matrix")));
    }
    Ok(Mat::from_fn(n, n, |i, j| rows[i][j]))
}

pub(crate) fn vector(v: &[f64]) -> Vector {
    Vector::from_column_slice(v)
}

/// Objective from its spec, using `default_kind` when none is given.
pub fn build_objective(spec: &ObjectiveSpec, default_kind: &str) -> CliResult<Arc<dyn Objective>> {
    let kind = spec.kind.as_deref().unwrap_or(default_kind);
    Ok(match kind {
        "quadratic" => match (&spec.matrix, &spec.eigenvalues) {
            (Some(_), Some(_)) => return Err(invalid("objective: give matrix or eigenvalues, not both")),
            (Some(m), None) => Arc::new(QuadraticObjective::new(matrix(m, "objective.matrix")?)?),
            (None, Some(e)) if !e.is_empty() => Arc::new(QuadraticObjective::diagonal(e)),
            _ => return Err(invalid("quadratic objective needs objective.matrix or objective.eigenvalues")),
        },
        "cosine" => {
            let d = CosineCoupled::default();
            Arc::new(CosineCoupled { w: spec.w.unwrap_or(d.w), kappa: spec.kappa.unwrap_or(d.kappa) })
        }
        "bimodal" => Arc::new(BimodalPiecewise),
        "mlp" => {
            let path = spec.data.clone().unwrap_or_else(|| PathBuf::from("data/iris.csv"));
            Arc::new(MlpClassifier::iris(load_iris(path)?))
        }
        other => return Err(invalid(format!("unknown objective kind {other:?}"))),
    })
}

/// Noise model of dimension `dim` from a `[noise]` section, isotropic
/// `default_sigma2` when the section is empty.
pub fn build_noise(spec: &NoiseSpec, dim: usize, default_sigma2: f64) -> CliResult<Arc<dyn NoiseModel>> {
    if let Some(cov) = &spec.cov {
        let c = matrix(cov, "noise.cov")?;
        if c.nrows() != dim {
            return Err(invalid(format!("noise.cov is {0}x{0} but the objective has dimension {dim}", c.nrows())));
        }
        return Ok(Arc::new(ConstantNoise::new(c)?));
    }
    Ok(Arc::new(make_isotropic_noise(dim, spec.isotropic_variance().unwrap_or(default_sigma2))?))
}

pub(crate) fn x0_or(cfg: &ExperimentConfig, default: &[f64], dim: usize) -> CliResult<Vector> {
    let v = cfg.x0.as_deref().unwrap_or(default);
    if v.len() != dim {
        return Err(invalid(format!("x0 has length {} but the objective has dimension {dim}", v.len())));
    }
    Ok(vector(v))
}

pub(crate) fn models_or(cfg: &ExperimentConfig, default: &[Model]) -> CliResult<Vec<Model>> {
    match &cfg.models {
        Some(names) if names.is_empty() => Err(invalid("models must not be empty")),
        Some(names) => names.iter().map(|n| Model::parse(n)).collect(),
        None => Ok(default.to_vec()),
    }
}
