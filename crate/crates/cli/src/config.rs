//! Experiment settings: preset defaults, then a flat `key=value` config file,
//! then command-line flags, each layer overriding the previous one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cir_milstein::montecarlo::dyadic_ladder;
use cir_milstein::{CirParams, WeakMoment};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Par1,
    Par2,
    Custom,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "par1" => Ok(Self::Par1),
            "par2" => Ok(Self::Par2),
            "custom" => Ok(Self::Custom),
            other => Err(CliError::Config(format!("unknown preset '{other}' (par1, par2, custom)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Par1 => "par1",
            Self::Par2 => "par2",
            Self::Custom => "custom",
        })
    }
}

/// Every setting as given by one source; `None` means "not set here".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub x0: Option<f64>,
    pub theta: Option<f64>,
    pub theta_list: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub dt_ladder: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub analytic: Option<bool>,
    pub research_mode: Option<bool>,
    pub ref_factor: Option<usize>,
    pub moment: Option<WeakMoment>,
    pub independent: Option<bool>,
}

impl Overrides {
    /// Fields set in `self` win over `base`.
    pub fn layered_over(self, base: Overrides) -> Overrides {
        Overrides {
            preset: self.preset.or(base.preset),
            alpha: self.alpha.or(base.alpha),
            mu: self.mu.or(base.mu),
            sigma: self.sigma.or(base.sigma),
            x0: self.x0.or(base.x0),
            theta: self.theta.or(base.theta),
            theta_list: self.theta_list.or(base.theta_list),
            dt: self.dt.or(base.dt),
            dt_ladder: self.dt_ladder.or(base.dt_ladder),
            horizon: self.horizon.or(base.horizon),
            paths: self.paths.or(base.paths),
            seed: self.seed.or(base.seed),
            threads: self.threads.or(base.threads),
            out: self.out.or(base.out),
            analytic: self.analytic.or(base.analytic),
            research_mode: self.research_mode.or(base.research_mode),
            ref_factor: self.ref_factor.or(base.ref_factor),
            moment: self.moment.or(base.moment),
            independent: self.independent.or(base.independent),
        }
    }

    pub fn from_config_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_config_text(&text)
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys accept `-` or `_`.
    pub fn from_config_text(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            map.insert(key.trim().replace('-', "_"), value.trim().to_string());
        }
        let mut o = Overrides::default();
        for (key, value) in &map {
            let v = value.as_str();
            match key.as_str() {
                "preset" => o.preset = Some(v.parse()?),
                "alpha" => o.alpha = Some(parse_num(key, v)?),
                "mu" => o.mu = Some(parse_num(key, v)?),
                "sigma" => o.sigma = Some(parse_num(key, v)?),
                "x0" => o.x0 = Some(parse_num(key, v)?),
                "theta" => o.theta = Some(parse_num(key, v)?),
                "theta_list" => o.theta_list = Some(parse_theta_list(v)?),
                "dt" => o.dt = Some(parse_step(v)?),
                "dt_ladder" => o.dt_ladder = Some(parse_dt_ladder(v)?),
                "horizon" => o.horizon = Some(parse_num(key, v)?),
                "paths" => o.paths = Some(parse_num(key, v)?),
                "seed" => o.seed = Some(parse_num(key, v)?),
                "threads" => o.threads = Some(parse_num(key, v)?),
                "out" => o.out = Some(PathBuf::from(v)),
                "analytic" => o.analytic = Some(parse_bool(key, v)?),
                "research_mode" => o.research_mode = Some(parse_bool(key, v)?),
                "independent" => o.independent = Some(parse_bool(key, v)?),
                "ref_factor" => o.ref_factor = Some(parse_num(key, v)?),
                "moment" => o.moment = Some(parse_moment(v)?),
                other => return Err(CliError::Config(format!("unknown config key '{other}'"))),
            }
        }
        Ok(o)
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

pub fn parse_moment(v: &str) -> Result<WeakMoment, CliError> {
    match v.trim() {
        "1" => Ok(WeakMoment::First),
        "2" => Ok(WeakMoment::Second),
        other => Err(CliError::Config(format!("moment must be 1 or 2, got '{other}'"))),
    }
}

/// A step size written as a number or as `2^-k`.
pub fn parse_step(v: &str) -> Result<f64, CliError> {
    let v = v.trim();
    if let Some(exp) = v.strip_prefix("2^") {
        let k: i32 = exp
            .parse()
            .map_err(|_| CliError::Config(format!("invalid power of two '{v}'")))?;
        return Ok(2f64.powi(k));
    }
    if let Some((num, den)) = v.split_once('/') {
        let num: f64 = parse_num("step", num.trim())?;
        let den: f64 = parse_num("step", den.trim())?;
        return Ok(num / den);
    }
    parse_num("step", v)
}

/// `2^-1..2^-8`, or a comma-separated list of steps.
pub fn parse_dt_ladder(v: &str) -> Result<Vec<f64>, CliError> {
    if let Some((lo, hi)) = v.split_once("..") {
        let exp = |s: &str| -> Result<i32, CliError> {
            s.trim()
                .strip_prefix("2^")
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| CliError::Config(format!("ladder bound '{s}' must look like 2^-k")))
        };
        let (a, b) = (-exp(lo)?, -exp(hi)?);
        if a > b {
            return Err(CliError::Config(format!("ladder '{v}' must run from coarse to fine")));
        }
        return Ok(dyadic_ladder(a, b));
    }
    v.split(',').map(parse_step).collect()
}

/// Comma-separated thetas, or `lo..hi:step`.
pub fn parse_theta_list(v: &str) -> Result<Vec<f64>, CliError> {
    if let Some((range, step)) = v.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| CliError::Config(format!("theta range '{v}' must look like lo..hi:step")))?;
        let lo: f64 = parse_num("theta_list", lo.trim())?;
        let hi: f64 = parse_num("theta_list", hi.trim())?;
        let step: f64 = parse_num("theta_list", step.trim())?;
        if !(step > 0.0) || hi < lo {
            return Err(CliError::Config(format!("invalid theta range '{v}'")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=count).map(|k| lo + step * k as f64).collect());
    }
    v.split(',').map(|s| parse_num("theta_list", s.trim())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Check,
    Weak,
    Strong,
    Revert,
    ThetaSweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Check => "check",
            Self::Weak => "weak",
            Self::Strong => "strong",
            Self::Revert => "revert",
            Self::ThetaSweep => "theta-sweep",
        }
    }
}

pub const DEFAULT_SEED: u64 = 20_240_607;
pub const DEFAULT_WEAK_PATHS: usize = 100_000;
pub const DEFAULT_STRONG_PATHS: usize = 20_000;
pub const DEFAULT_REVERT_PATHS: usize = 100_000;
pub const DEFAULT_WEAK_REF_FACTOR: usize = 16;
/// `2^-8 / 2^6 = 2^-14`.
pub const DEFAULT_STRONG_REF_FACTOR: usize = 64;

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub preset: Preset,
    pub params: CirParams,
    pub theta_list: Vec<f64>,
    pub dt: f64,
    pub dt_ladder: Vec<f64>,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub analytic: bool,
    pub research_mode: bool,
    pub ref_factor: usize,
    pub moment: WeakMoment,
    pub independent: bool,
}

impl ExperimentConfig {
    pub fn resolve(command: Command, o: Overrides) -> Result<Self, CliError> {
        let any_param = o.alpha.is_some() || o.mu.is_some() || o.sigma.is_some() || o.x0.is_some();
        let preset = o
            .preset
            .unwrap_or(if any_param { Preset::Custom } else { Preset::Par1 });
        let base = match preset {
            Preset::Par1 => Some(CirParams::par1()),
            Preset::Par2 => Some(CirParams::par2()),
            Preset::Custom => None,
        };
        let pick = |v: Option<f64>, from_base: fn(&CirParams) -> f64, name: &str| {
            v.or(base.as_ref().map(from_base)).ok_or_else(|| {
                CliError::Config(format!("custom parameters need --{name}"))
            })
        };
        let params = CirParams::new(
            pick(o.alpha, CirParams::alpha, "alpha")?,
            pick(o.mu, CirParams::mu, "mu")?,
            pick(o.sigma, CirParams::sigma, "sigma")?,
            pick(o.x0, CirParams::x0, "x0")?,
        )?;

        let default_thetas: Vec<f64> = match command {
            Command::Revert => vec![1.0, 1.5],
            Command::ThetaSweep => (0..9).map(|k| 1.0 + 0.25 * k as f64).collect(),
            _ => vec![1.0],
        };
        let theta_list = o
            .theta_list
            .or(o.theta.map(|t| vec![t]))
            .unwrap_or(default_thetas);
        if theta_list.is_empty() {
            return Err(CliError::Config("empty theta list".into()));
        }
        if matches!(command, Command::Weak | Command::Strong) && theta_list.len() != 1 {
            return Err(CliError::Config(format!("{} takes a single --theta", command.name())));
        }

        let default_horizon = match command {
            Command::Weak | Command::Strong => 1.0,
            _ => 15.0,
        };
        let default_paths = match command {
            Command::Strong => DEFAULT_STRONG_PATHS,
            Command::Revert => DEFAULT_REVERT_PATHS,
            _ => DEFAULT_WEAK_PATHS,
        };
        let default_ref = match command {
            Command::Strong => DEFAULT_STRONG_REF_FACTOR,
            _ => DEFAULT_WEAK_REF_FACTOR,
        };
        Ok(Self {
            command,
            preset,
            params,
            theta_list,
            dt: o.dt.unwrap_or(0.125),
            dt_ladder: o.dt_ladder.unwrap_or_else(|| dyadic_ladder(1, 8)),
            horizon: o.horizon.unwrap_or(default_horizon),
            n_paths: o.paths.unwrap_or(default_paths),
            seed: o.seed.unwrap_or(DEFAULT_SEED),
            threads: o.threads,
            output_dir: o.out.unwrap_or_else(|| PathBuf::from("results")),
            analytic: o.analytic.unwrap_or(false),
            research_mode: o.research_mode.unwrap_or(false),
            ref_factor: o.ref_factor.unwrap_or(default_ref),
            moment: o.moment.unwrap_or_default(),
            independent: o.independent.unwrap_or(false),
        })
    }
}
