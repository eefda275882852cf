//! Exit-time experiments: 1D scaling probes around a minimum or a maximum,
//! and HA-SME against SME-2 near a saddle.

use super::Outcome;
use crate::config::ExperimentConfig;
use crate::error::{invalid, CliResult};
use serde::Serialize;
use sgdsde_core::escape::{
    exit_time_mc, hasme_1d, hasme_exit_suite, saddle_compare, scaling_probe, ExitTimeReport, McSettings, ProbeKind, Region,
    DEFAULT_QUAD_TOL,
};
use sgdsde_core::linalg::Vector;
use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EscapeKind {
    /// `f = ½λx²`, `λ > 0`: `η log E[τ]` should level off.
    MinExp,
    /// `f = ½λx²`, `λ < 0`: `E[τ]/log(1/η)` should stay bounded.
    MaxLog,
    /// `f = ½(λ₊x² + λ₋y²)`: HA-SME leaves the box, SME-2 does not.
    SaddleCompare,
}

impl EscapeKind {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "min-exp" => Ok(Self::MinExp),
            "max-log" => Ok(Self::MaxLog),
            "saddle-compare" => Ok(Self::SaddleCompare),
            _ => Err(invalid(format!("escape variant must be min-exp, max-log or saddle-compare, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EscapeSettings {
    pub kind: EscapeKind,
    pub sigma2: f64,
    pub half_width: f64,
    /// Probe step sizes; the first one also gets a Monte Carlo check.
    pub etas: Vec<f64>,
    pub lambda: f64,
    /// Saddle step size and eigenvalues.
    pub eta: f64,
    pub lambdas: [f64; 2],
    pub quad_tol: f64,
    pub n_runs: usize,
    /// Defaults to `η/20`.
    pub dt: Option<f64>,
    /// Defaults to `10⁶η` for the probes and `10³η` for the saddle.
    pub t_cap: Option<f64>,
    pub bridge: bool,
    pub seed: u64,
}

impl EscapeSettings {
    pub fn new(kind: EscapeKind) -> Self {
        let eta = 0.1;
        Self {
            kind,
            sigma2: 1.0,
            half_width: 0.5,
            etas: vec![0.1, 0.05, 0.025, 0.0125],
            lambda: if kind == EscapeKind::MaxLog { -1.0 } else { 1.0 },
            eta,
            lambdas: [0.5 / eta, -2.5 / eta],
            quad_tol: DEFAULT_QUAD_TOL,
            n_runs: if kind == EscapeKind::SaddleCompare { 1000 } else { 4000 },
            dt: None,
            t_cap: None,
            bridge: true,
            seed: 0,
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let kind = EscapeKind::parse(cfg.variant.as_deref().unwrap_or("min-exp"))?;
        let e = cfg.escape_spec();
        let mut s = Self::new(kind);
        if cfg.noise.as_ref().is_some_and(|n| n.cov.is_some()) {
            return Err(invalid("escape uses isotropic noise (noise.sigma2)"));
        }
        s.sigma2 = cfg.noise_spec().isotropic_variance().unwrap_or(s.sigma2);
        if let Some(etas) = &cfg.etas {
            s.etas = etas.clone();
        }
        if let Some(eta) = cfg.eta {
            s.eta = eta;
            s.lambdas = [0.5 / eta, -2.5 / eta];
        }
        s.half_width = e.half_width.unwrap_or(s.half_width);
        s.lambda = e.lambda.unwrap_or(s.lambda);
        s.lambdas = e.lambdas.unwrap_or(s.lambdas);
        s.quad_tol = e.quad_tol.unwrap_or(s.quad_tol);
        s.dt = e.dt.or(s.dt);
        s.t_cap = e.t_cap.or(s.t_cap);
        s.bridge = e.bridge.unwrap_or(s.bridge);
        s.n_runs = cfg.n_runs.unwrap_or(s.n_runs);
        s.seed = cfg.master_seed.unwrap_or(s.seed);
        Ok(s)
    }

    fn mc(&self, eta: f64, default_cap: f64) -> McSettings {
        McSettings {
            dt: self.dt.unwrap_or(eta / 20.0),
            n_runs: self.n_runs,
            t_cap: self.t_cap.unwrap_or(default_cap),
            seed: self.seed,
            bridge: self.bridge,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EscapeRow {
    pub model: &'static str,
    pub eta: f64,
    pub method: &'static str,
    pub e_tau: f64,
    pub stderr_or_tol: f64,
    pub censored_fraction: f64,
    pub biased_low: bool,
}

impl EscapeRow {
    fn new(model: &'static str, r: &ExitTimeReport) -> Self {
        Self {
            model,
            eta: r.eta,
            method: r.method.name(),
            e_tau: r.e_tau,
            stderr_or_tol: r.tol_or_stderr,
            censored_fraction: r.censored_fraction,
            biased_low: r.biased_low,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub functional: Vec<f64>,
    pub last_change: f64,
    pub band_ratio: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EscapeReport {
    pub settings: EscapeSettings,
    pub rows: Vec<EscapeRow>,
    pub probe: Option<ProbeSummary>,
    /// `|MC − quadrature| / quadrature` at the first probe step size.
    pub mc_relative_gap: Option<f64>,
}

impl EscapeReport {
    pub fn row(&self, model: &str, method: &str) -> Option<&EscapeRow> {
        self.rows.iter().find(|r| r.model == model && r.method == method)
    }

    /// Columns `model,eta,method,E_tau,stderr_or_tol,censored_fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,eta,method,E_tau,stderr_or_tol,censored_fraction\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:e},{:e},{}", r.model, r.eta, r.method, r.e_tau, r.stderr_or_tol, r.censored_fraction);
        }
        out
    }

    pub fn outcome(&self) -> CliResult<Outcome> {
        Outcome::new("escape", Some(self.settings.seed), self.to_csv(), self)
    }
}

pub fn run_escape(s: &EscapeSettings) -> CliResult<EscapeReport> {
    match s.kind {
        EscapeKind::SaddleCompare => {
            let settings = s.mc(s.eta, 1e3 * s.eta);
            let rows = saddle_compare(s.lambdas, s.sigma2, s.eta, s.half_width, settings)?;
            Ok(EscapeReport {
                settings: s.clone(),
                rows: rows.iter().map(|r| EscapeRow::new(r.kind.name(), &r.report)).collect(),
                probe: None,
                mc_relative_gap: None,
            })
        }
        EscapeKind::MinExp | EscapeKind::MaxLog => {
            let expected_sign = if s.kind == EscapeKind::MinExp { 1.0 } else { -1.0 };
            if s.lambda * expected_sign <= 0.0 {
                return Err(invalid(format!("{:?} needs λ with sign {expected_sign}, got {}", s.kind, s.lambda)));
            }
            let quad = hasme_exit_suite(s.lambda, s.sigma2, s.half_width, &s.etas, s.quad_tol)?;
            let kind = if s.kind == EscapeKind::MinExp { ProbeKind::MinExp } else { ProbeKind::MaxLog };
            let probe = scaling_probe(kind, &quad.iter().map(|r| (r.eta, r.e_tau)).collect::<Vec<_>>())?;
            let mut rows: Vec<EscapeRow> = quad.iter().map(|r| EscapeRow::new("hasme", r)).collect();
            let mut mc_relative_gap = None;
            if s.n_runs > 0 {
                let eta = s.etas[0];
                let model = hasme_1d(s.lambda, s.sigma2, eta)?;
                let region = Region::symmetric_box(1, s.half_width);
                let mc = exit_time_mc(&model, &region, &Vector::zeros(1), s.mc(eta, 1e6 * eta))?;
                mc_relative_gap = Some((mc.e_tau - quad[0].e_tau).abs() / quad[0].e_tau);
                rows.push(EscapeRow::new("hasme", &mc));
            }
            Ok(EscapeReport {
                settings: s.clone(),
                rows,
                probe: Some(ProbeSummary {
                    functional: probe.functional,
                    last_change: probe.last_change,
                    band_ratio: probe.band_ratio,
                    estimate: probe.estimate,
                }),
                mc_relative_gap,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_without_mc() {
        let s = EscapeSettings { n_runs: 0, ..EscapeSettings::new(EscapeKind::MaxLog) };
        let r = run_escape(&s).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.mc_relative_gap.is_none());
        assert!(r.probe.unwrap().band_ratio < 2.0);
    }

    #[test]
    fn wrong_sign_is_rejected() {
        let s = EscapeSettings { lambda: -1.0, n_runs: 0, ..EscapeSettings::new(EscapeKind::MinExp) };
        assert_eq!(run_escape(&s).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn config_sets_saddle_eigenvalues_from_eta() {
        let cfg = ExperimentConfig::from_toml("variant = \"saddle-compare\"\neta = 0.2").unwrap();
        let s = EscapeSettings::from_config(&cfg).unwrap();
        assert_eq!(s.lambdas, [2.5, -12.5]);
        assert_eq!(s.kind, EscapeKind::SaddleCompare);
    }
}
