//! Experiment runner for theta-Milstein CIR simulations.
//!
//! Each subcommand writes one or more CSV files plus a short text summary and
//! maps its outcome onto the exit-code contract in [`Outcome`].

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use cir_milstein::CirError;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{parse_dt_ladder, parse_moment, parse_step, parse_theta_list, Overrides, Preset};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] CirError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Model(CirError::InsufficientPaths(_)) => 2,
            _ => 1,
        }
    }
}

/// Exit codes: 0 ran and met its acceptance window (or has none), 1 domain
/// or configuration error, 2 ran but missed its window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cirsim", version, about = "Theta-Milstein experiments for the CIR model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Report the positivity conditions and long-term moments
    Check(CommonArgs),
    /// Weak-error ladder against the exact moment
    Weak(CommonArgs),
    /// Strong-error ladder against a fine coupled reference
    Strong(CommonArgs),
    /// Sample mean and second moment over time
    Revert(CommonArgs),
    /// Closed-form moment errors over a theta grid
    ThetaSweep(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat key=value settings file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// Comma list or lo..hi:step
    #[arg(long, value_parser = cli_theta_list)]
    pub theta_list: Option<FloatList>,
    /// Step size (number, 1/8 or 2^-3)
    #[arg(long, value_parser = cli_step)]
    pub dt: Option<f64>,
    /// 2^-1..2^-8 or a comma list
    #[arg(long, value_parser = cli_ladder)]
    pub dt_ladder: Option<FloatList>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the closed-form recurrences instead of sampling (weak)
    #[arg(long)]
    pub analytic: bool,
    /// Plain independent sampling per rung instead of the coupled estimator (weak)
    #[arg(long)]
    pub independent: bool,
    /// Allow theta < 1 and 4*alpha*mu < sigma^2
    #[arg(long)]
    pub research_mode: bool,
    /// Reference step = finest ladder step / ref-factor
    #[arg(long)]
    pub ref_factor: Option<usize>,
    /// Weak-error moment: 1 or 2
    #[arg(long, value_parser = cli_moment)]
    pub moment: Option<cir_milstein::WeakMoment>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

/// A parsed list flag (kept as one value so clap does not split it).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatList(pub Vec<f64>);

fn cli_theta_list(s: &str) -> Result<FloatList, String> {
    parse_theta_list(s).map(FloatList).map_err(|e| e.to_string())
}

fn cli_step(s: &str) -> Result<f64, String> {
    parse_step(s).map_err(|e| e.to_string())
}

fn cli_ladder(s: &str) -> Result<FloatList, String> {
    parse_dt_ladder(s).map(FloatList).map_err(|e| e.to_string())
}

fn cli_moment(s: &str) -> Result<cir_milstein::WeakMoment, String> {
    parse_moment(s).map_err(|e| e.to_string())
}

impl CommonArgs {
    pub fn overrides(&self) -> Result<Overrides, CliError> {
        let flags = Overrides {
            preset: self.preset,
            alpha: self.alpha,
            mu: self.mu,
            sigma: self.sigma,
            x0: self.x0,
            theta: self.theta,
            theta_list: self.theta_list.clone().map(|l| l.0),
            dt: self.dt,
            dt_ladder: self.dt_ladder.clone().map(|l| l.0),
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
            analytic: self.analytic.then_some(true),
            research_mode: self.research_mode.then_some(true),
            ref_factor: self.ref_factor,
            moment: self.moment,
            independent: self.independent.then_some(true),
        };
        let file = match &self.config {
            Some(path) => Overrides::from_config_file(path)?,
            None => Overrides::default(),
        };
        Ok(flags.layered_over(file))
    }
}

/// Resolves settings and runs one subcommand on a pool capped by `--threads`.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    use crate::config::{Command, ExperimentConfig};
    let (command, args) = match &cli.command {
        CliCommand::Check(a) => (Command::Check, a),
        CliCommand::Weak(a) => (Command::Weak, a),
        CliCommand::Strong(a) => (Command::Strong, a),
        CliCommand::Revert(a) => (Command::Revert, a),
        CliCommand::ThetaSweep(a) => (Command::ThetaSweep, a),
    };
    let cfg = ExperimentConfig::resolve(command, args.overrides()?)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cfg))
}
