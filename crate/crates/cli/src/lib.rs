//! Experiment runners for SGD and its SDE proxies, with CSV and JSON output.

pub mod commands;
pub mod config;
pub mod error;

use clap::{Args, Parser, Subcommand};
use commands::{
    coeff::{run_coeff_verify, CoeffSettings},
    escape::{run_escape, EscapeSettings},
    fig1::{run_fig1, Fig1Settings},
    fig2::{run_fig2, Fig2Settings},
    quad_match::{run_quad_match, QuadMatchSettings},
    table1::{run_table1, Table1Settings},
    weak_order::{run_weak_order, WeakOrderSettings},
    write_outputs, Outcome,
};
use config::ExperimentConfig;
use error::{CliError, CliResult};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "sgdsde", version, about = "SGD and its SDE approximations: simulations, laws and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Fig1,
    Fig2,
    Table1,
    QuadMatch,
    CoeffVerify,
    Escape,
    WeakOrder,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quadratic saddle or minimum at η = 2.1: MC ensembles beside closed-form laws.
    Fig1(CommonArgs),
    /// Bimodal piecewise quadratic at η = 0.999: SGD, SPF, HA-SME.
    Fig2(CommonArgs),
    /// Weak error of SME-1, SME-2, HA-SME against SGD on the Iris MLP.
    Table1(CommonArgs),
    /// Exact-match conditions and residuals on a quadratic.
    QuadMatch(CommonArgs),
    /// Coefficient identities and truncated-series accuracy.
    CoeffVerify(CommonArgs),
    /// Exit-time probes (min-exp, max-log) and the saddle comparison.
    Escape(CommonArgs),
    /// Weak error over a step-size ladder with a fitted order.
    WeakOrder(CommonArgs),
}

/// Flags shared by every command. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `out/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// fig1: saddle|minimum; escape: min-exp|max-log|saddle-compare;
    /// quad-match: hard|commuting|custom.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Noise standard deviation (table1) as a shortcut for `noise.sigma`.
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl Command {
    pub fn parts(&self) -> (CommandKind, &CommonArgs) {
        match self {
            Command::Fig1(a) => (CommandKind::Fig1, a),
            Command::Fig2(a) => (CommandKind::Fig2, a),
            Command::Table1(a) => (CommandKind::Table1, a),
            Command::QuadMatch(a) => (CommandKind::QuadMatch, a),
            Command::CoeffVerify(a) => (CommandKind::CoeffVerify, a),
            Command::Escape(a) => (CommandKind::Escape, a),
            Command::WeakOrder(a) => (CommandKind::WeakOrder, a),
        }
    }
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Fig1 => "fig1",
            CommandKind::Fig2 => "fig2",
            CommandKind::Table1 => "table1",
            CommandKind::QuadMatch => "quad_match",
            CommandKind::CoeffVerify => "coeff_verify",
            CommandKind::Escape => "escape",
            CommandKind::WeakOrder => "weak_order",
        }
    }
}

/// Config file (if any) with command-line overrides applied.
pub fn effective_config(kind: CommandKind, args: &CommonArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = &cfg.experiment {
        if name.replace('-', "_") != kind.name() {
            return Err(CliError::Validation(format!("config is for experiment {name:?}, not {}", kind.name())));
        }
    }
    cfg.experiment = Some(kind.name().into());
    cfg.master_seed = args.seed.or(cfg.master_seed);
    cfg.output = args.out.clone().or(cfg.output);
    cfg.n_runs = args.runs.or(cfg.n_runs);
    cfg.eta = args.eta.or(cfg.eta);
    cfg.variant = args.variant.clone().or(cfg.variant);
    cfg.substeps_per_eta = args.substeps.or(cfg.substeps_per_eta);
    if let Some(steps) = args.steps {
        cfg.steps = Some(steps);
        cfg.horizon = None;
    }
    if let Some(sigma) = args.sigma {
        cfg.noise = Some(config::NoiseSpec { sigma: Some(sigma), ..Default::default() });
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command on a resolved config.
pub fn run(kind: CommandKind, cfg: &ExperimentConfig) -> CliResult<Outcome> {
    match kind {
        CommandKind::Fig1 => run_fig1(&Fig1Settings::from_config(cfg)?)?.outcome(),
        CommandKind::Fig2 => run_fig2(&Fig2Settings::from_config(cfg)?)?.outcome(),
        CommandKind::Table1 => run_table1(&Table1Settings::from_config(cfg)?)?.outcome(),
        CommandKind::QuadMatch => run_quad_match(&QuadMatchSettings::from_config(cfg)?)?.outcome(),
        CommandKind::CoeffVerify => run_coeff_verify(&CoeffSettings::from_config(cfg)?)?.outcome(),
        CommandKind::Escape => run_escape(&EscapeSettings::from_config(cfg)?)?.outcome(),
        CommandKind::WeakOrder => run_weak_order(&WeakOrderSettings::from_config(cfg)?)?.outcome(),
    }
}

/// Parses `args`, runs the command, writes its outputs and returns the exit
/// code: 0 on success, 2 on validation errors, 3 on numerical failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (kind, common) = cli.command.parts();
    let result = effective_config(kind, common).and_then(|cfg| {
        let outcome = run(kind, &cfg)?;
        let dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
        let (csv, json) = write_outputs(&dir, &outcome, &cfg)?;
        println!("wrote {} and {}", csv.display(), json.display());
        match outcome.failure {
            Some(msg) => Err(CliError::Numerical(msg)),
            None => Ok(()),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sgdsde: {e}");
            e.exit_code()
        }
    }
}
