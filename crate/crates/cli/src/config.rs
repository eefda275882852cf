//! Experiment configuration files.
//!
//! A config is TOML restricted to a fixed key set; dotted keys such as
//! `noise.sigma2 = 1.0` address the nested sections. Every key is optional
//! and each command falls back to its own defaults for whatever is missing.

use crate::error::{invalid, CliResult};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    /// `saddle` / `minimum` for fig1, `min-exp` / `max-log` / `saddle-compare`
    /// for escape, `hard` / `commuting` / `custom` for quad-match.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub etas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_runs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps_per_eta: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub richardson: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Model names: `sgd`, `sme1`, `sme2`, `spf`, `hasme`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub escape: Option<EscapeSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeff: Option<CoeffSpec>,
}

/// `kind` is one of `quadratic`, `cosine`, `bimodal`, `mlp`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Diagonal Hessian of a quadratic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    /// Full symmetric Hessian of a quadratic, row by row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Iris CSV for `mlp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

/// At most one of `sigma2`, `sigma`, `cov`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscapeSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Saddle eigenvalues `(λ₊, λ₋)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quad_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bridge: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoeffSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Range checks that do not depend on the command.
    pub fn validate(&self) -> CliResult<()> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(invalid(format!("{name} must be positive and finite, got {x}"))),
            _ => Ok(()),
        };
        positive("eta", self.eta)?;
        positive("horizon", self.horizon)?;
        for &e in self.etas.iter().flatten() {
            positive("etas", Some(e))?;
        }
        if self.steps.is_some() && self.horizon.is_some() {
            return Err(invalid("give steps or horizon, not both"));
        }
        if self.substeps_per_eta == Some(0) {
            return Err(invalid("substeps_per_eta must be at least 1"));
        }
        if let Some(n) = &self.noise {
            let given = [n.sigma2.is_some(), n.sigma.is_some(), n.cov.is_some()].iter().filter(|b| **b).count();
            if given > 1 {
                return Err(invalid("noise: give only one of sigma2, sigma, cov"));
            }
            if let Some(s) = n.sigma2.or(n.sigma) {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(invalid(format!("noise variance must be non-negative, got {s}")));
                }
            }
        }
        if let Some(e) = &self.escape {
            positive("escape.half_width", e.half_width)?;
            positive("escape.dt", e.dt)?;
            positive("escape.t_cap", e.t_cap)?;
            positive("escape.quad_tol", e.quad_tol)?;
        }
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        self.noise.clone().unwrap_or_default()
    }

    pub fn objective_spec(&self) -> ObjectiveSpec {
        self.objective.clone().unwrap_or_default()
    }

    pub fn escape_spec(&self) -> EscapeSpec {
        self.escape.clone().unwrap_or_default()
    }

    pub fn coeff_spec(&self) -> CoeffSpec {
        self.coeff.clone().unwrap_or_default()
    }

    /// Step count from `steps`, else from `horizon / η`, else `default`.
    pub fn steps_for(&self, eta: f64, default: usize) -> usize {
        match (self.steps, self.horizon) {
            (Some(s), _) => s,
            (None, Some(h)) => (h / eta).round() as usize,
            _ => default,
        }
    }
}

impl NoiseSpec {
    /// Isotropic variance if this noise section is isotropic.
    pub fn isotropic_variance(&self) -> Option<f64> {
        self.sigma2.or(self.sigma.map(|s| s * s))
    }
}
