//! Coefficient identities and truncated-series checks.

use super::Outcome;
use crate::config::ExperimentConfig;
use crate::error::{invalid, CliError, CliResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sgdsde_core::coefficients::{coefficient_csv, truncated_diffusion_sq, truncated_drift, verify_identities, MAX_B_ORDER};
use sgdsde_core::linalg::{eig_sym, max_abs, symmetrize, Mat, Vector};
use sgdsde_core::problems::{ConstantNoise, CosineCoupled, Objective, QuadraticObjective};
use sgdsde_core::proxies::{hasme_diffusion_sq, hasme_drift};

#[derive(Debug, Clone, Serialize)]
pub struct CoeffSettings {
    /// Identities are checked for `s ≤ P` and `s + m ≤ P`.
    pub order: usize,
    pub series_order: usize,
    pub instances: usize,
    /// Largest `η·|λ|` in the random series instances.
    pub max_eta_lambda: f64,
    pub seed: u64,
}

impl Default for CoeffSettings {
    fn default() -> Self {
        Self { order: 8, series_order: 40, instances: 200, max_eta_lambda: 0.5, seed: 0 }
    }
}

impl CoeffSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        let c = cfg.coeff_spec();
        let d = Self::default();
        let s = Self {
            order: c.order.unwrap_or(d.order),
            series_order: c.series_order.unwrap_or(d.series_order),
            instances: c.instances.unwrap_or(d.instances),
            seed: cfg.master_seed.unwrap_or(d.seed),
            ..d
        };
        if s.order == 0 || s.order > MAX_B_ORDER {
            return Err(invalid(format!("coeff.order must be in 1..={MAX_B_ORDER}")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoeffReport {
    pub settings: CoeffSettings,
    pub c_exact: bool,
    pub a_symmetry: f64,
    pub b_antisymmetry: f64,
    pub b_diagonal: f64,
    pub a_row_matches_log: bool,
    /// Largest entrywise gap between truncated series and closed forms.
    pub drift_gap: f64,
    pub diffusion_gap: f64,
    #[serde(skip)]
    pub csv: String,
}

impl CoeffReport {
    pub fn outcome(&self) -> CliResult<Outcome> {
        Outcome::new("coeff_verify", Some(self.settings.seed), self.csv.clone(), self)
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> CliResult<Mat> {
    let b = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    Ok(eig_sym(&(&b + b.transpose()))?.vectors)
}

/// Random `(objective, Σ, x)`; quadratics with commuting or generic `Σ`
/// alternate with the cosine objective.
fn random_instance(trial: usize, rng: &mut ChaCha8Rng) -> CliResult<(Box<dyn Objective>, ConstantNoise, Vector)> {
    let n = if trial % 3 == 2 { 2 } else { rng.gen_range(1..=3) };
    let c = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let generic = symmetrize(&(&c * c.transpose()));
    let x = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    Ok(match trial % 3 {
        0 => {
            let u = random_orthogonal(n, rng)?;
            let lams = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let s = Vector::from_fn(n, |_, _| rng.gen_range(0.0..2.0));
            let a = symmetrize(&(&u * Mat::from_diagonal(&lams) * u.transpose()));
            let sigma = symmetrize(&(&u * Mat::from_diagonal(&s) * u.transpose()));
            (Box::new(QuadraticObjective::new(a)?), ConstantNoise::new(sigma)?, x)
        }
        1 => {
            let u = random_orthogonal(n, rng)?;
            let lams = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a = symmetrize(&(&u * Mat::from_diagonal(&lams) * u.transpose()));
            (Box::new(QuadraticObjective::new(a)?), ConstantNoise::new(generic)?, x)
        }
        _ => {
            let obj = CosineCoupled { w: [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)], kappa: rng.gen_range(-0.5..0.5) };
            (Box::new(obj), ConstantNoise::new(generic)?, x)
        }
    })
}

/// Largest gaps `(drift, diffusion)` between the order-`P` truncated series
/// and the closed forms over random instances with `η·max|λ| ≤ max_eta_lambda`.
pub fn series_gaps(s: &CoeffSettings) -> CliResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (mut drift_gap, mut diffusion_gap) = (0.0f64, 0.0f64);
    for trial in 0..s.instances {
        let (obj, noise, x) = random_instance(trial, &mut rng)?;
        let radius = eig_sym(&obj.hessian(&x))?.spectral_radius().max(1e-3);
        let eta = rng.gen_range(0.01..s.max_eta_lambda) / radius;
        let drift = hasme_drift(obj.as_ref(), &x, eta)?.map(|z| z.re);
        let diffusion = hasme_diffusion_sq(obj.as_ref(), &noise, &x, eta)?;
        drift_gap = drift_gap.max((truncated_drift(obj.as_ref(), &x, eta, s.series_order) - drift).amax());
        diffusion_gap =
            diffusion_gap.max(max_abs(&(truncated_diffusion_sq(obj.as_ref(), &noise, &x, eta, s.series_order) - diffusion)));
    }
    Ok((drift_gap, diffusion_gap))
}

pub fn run_coeff_verify(s: &CoeffSettings) -> CliResult<CoeffReport> {
    let ids = verify_identities(s.order).map_err(|e| CliError::Numerical(e.to_string()))?;
    let csv = coefficient_csv(s.order).map_err(|e| CliError::Numerical(e.to_string()))?;
    let (drift_gap, diffusion_gap) = series_gaps(s)?;
    Ok(CoeffReport {
        settings: s.clone(),
        c_exact: ids.c_exact,
        a_symmetry: ids.a_symmetry,
        b_antisymmetry: ids.b_antisymmetry,
        b_diagonal: ids.b_diagonal,
        a_row_matches_log: ids.a_row_matches_log,
        drift_gap,
        diffusion_gap,
        csv,
    })
}
