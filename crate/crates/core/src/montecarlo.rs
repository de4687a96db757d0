//! Ensemble estimators, weak/strong error ladders and log-log slope fitting.
//!
//! Paths are processed in fixed blocks of [`PATH_BLOCK`] consecutive path
//! indices. Blocks may run on any thread, but their partial sums are always
//! combined in block order, so every estimate is bitwise independent of the
//! thread count.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{CirError, Result};
use crate::model::{exact_mean, exact_second_moment, theta_coefficients, CirParams};
use crate::scheme::{steps_for, OneStepMap, SchemeConfig, ThetaMilstein};
use crate::stochastic::NoiseStream;
use crate::tolerances::{MIN_LADDER_PATHS, PATH_BLOCK, Z_95};

/// Theta of the fine reference solution in strong-error ladders.
pub const REFERENCE_THETA: f64 = 1.0;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Self) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums of a sample and its square.
#[derive(Debug, Clone, Copy, Default)]
struct SampleSums {
    s1: CompensatedSum,
    s2: CompensatedSum,
}

impl SampleSums {
    #[inline]
    fn push(&mut self, x: f64) {
        self.s1.add(x);
        self.s2.add(x * x);
    }

    fn merge(&mut self, other: &Self) {
        self.s1.merge(&other.s1);
        self.s2.merge(&other.s2);
    }

    fn mean(&self, n: usize) -> f64 {
        self.s1.value() / n as f64
    }

    /// Biased (1/n) variance, clamped at zero.
    fn population_variance(&self, n: usize) -> f64 {
        let m = self.mean(n);
        (self.s2.value() / n as f64 - m * m).max(0.0)
    }

    fn half_width(&self, n: usize) -> f64 {
        if n < 2 {
            return f64::INFINITY;
        }
        let sample_var = self.population_variance(n) * n as f64 / (n as f64 - 1.0);
        Z_95 * (sample_var / n as f64).sqrt()
    }
}

fn run_blocks<A, F>(n_paths: usize, work: F) -> Result<Vec<A>>
where
    A: Send,
    F: Fn(Range<usize>) -> Result<A> + Sync,
{
    let n_blocks = n_paths.div_ceil(PATH_BLOCK);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| work(b * PATH_BLOCK..((b + 1) * PATH_BLOCK).min(n_paths)))
        .collect()
}

/// Sampled first and second moments on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrace {
    pub times: Vec<f64>,
    pub sample_mean: Vec<f64>,
    pub sample_second_moment: Vec<f64>,
    /// 95% half-widths of the mean.
    pub mean_half_widths: Vec<f64>,
    /// 95% half-widths of the second moment.
    pub second_half_widths: Vec<f64>,
    pub n_paths: usize,
    /// Smallest state seen anywhere on any path, recorded or not.
    pub min_state: f64,
}

/// Per-time accumulators, shifted by `x0` so a deterministic start gives
/// exact moments and zero width.
#[derive(Debug, Clone, Default)]
struct TraceBlock {
    shifted: Vec<SampleSums>,
    squared: Vec<SampleSums>,
    min_state: f64,
}

pub fn sample_moments(
    p: &CirParams,
    cfg: &SchemeConfig,
    n_paths: usize,
    record_times: &[f64],
    seed: u64,
) -> Result<MomentTrace> {
    sample_moments_on_level(p, cfg, n_paths, record_times, seed, 0)
}

fn sample_moments_on_level(
    p: &CirParams,
    cfg: &SchemeConfig,
    n_paths: usize,
    record_times: &[f64],
    seed: u64,
    level: u32,
) -> Result<MomentTrace> {
    if n_paths < 2 {
        return Err(CirError::InsufficientPaths(format!(
            "{n_paths} paths; at least 2 are needed for a sample variance"
        )));
    }
    let map = ThetaMilstein::new(p, cfg)?;
    let record_steps = record_times
        .iter()
        .map(|&t| steps_for(t, cfg.dt))
        .collect::<Result<Vec<_>>>()?;
    if record_steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CirError::InvalidConfig("record times must be strictly increasing".into()));
    }
    if let Some(&last) = record_steps.last() {
        if last > cfg.n_steps {
            return Err(CirError::InvalidConfig(format!(
                "record time {} is past the horizon {}",
                record_times[record_times.len() - 1],
                cfg.horizon()
            )));
        }
    }
    let x0 = p.x0();
    let n_rec = record_steps.len();
    let n_steps = cfg.n_steps;

    let blocks = run_blocks(n_paths, |paths| {
        let mut block = TraceBlock {
            shifted: vec![SampleSums::default(); n_rec],
            squared: vec![SampleSums::default(); n_rec],
            min_state: x0,
        };
        for path in paths {
            let mut noise = NoiseStream::new(seed, path as u64, level, cfg.dt)?;
            let mut x = x0;
            let mut next_rec = 0;
            for n in 0..=n_steps {
                if n > 0 {
                    x = map.step(n - 1, x, noise.next_increment())?;
                    block.min_state = block.min_state.min(x);
                }
                while next_rec < n_rec && record_steps[next_rec] == n {
                    block.shifted[next_rec].push(x - x0);
                    block.squared[next_rec].push(x * x - x0 * x0);
                    next_rec += 1;
                }
            }
        }
        Ok(block)
    })?;

    let mut total = TraceBlock {
        shifted: vec![SampleSums::default(); n_rec],
        squared: vec![SampleSums::default(); n_rec],
        min_state: x0,
    };
    for b in &blocks {
        for i in 0..n_rec {
            total.shifted[i].merge(&b.shifted[i]);
            total.squared[i].merge(&b.squared[i]);
        }
        total.min_state = total.min_state.min(b.min_state);
    }

    let mut trace = MomentTrace {
        times: record_steps.iter().map(|&n| n as f64 * cfg.dt).collect(),
        sample_mean: Vec::with_capacity(n_rec),
        sample_second_moment: Vec::with_capacity(n_rec),
        mean_half_widths: Vec::with_capacity(n_rec),
        second_half_widths: Vec::with_capacity(n_rec),
        n_paths,
        min_state: total.min_state,
    };
    for i in 0..n_rec {
        let mean = x0 + total.shifted[i].mean(n_paths);
        // E[X^2] = mean^2 + Var, which keeps the sample Cauchy-Schwarz bound exact.
        let second = mean * mean + total.shifted[i].population_variance(n_paths);
        trace.sample_mean.push(mean);
        trace.sample_second_moment.push(second);
        trace.mean_half_widths.push(total.shifted[i].half_width(n_paths));
        trace.second_half_widths.push(total.squared[i].half_width(n_paths));
    }
    Ok(trace)
}

/// Rows of `(dt, error, half-width)` with the fitted log-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLadder {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub half_widths: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

impl ErrorLadder {
    pub fn from_rows(dts: Vec<f64>, errors: Vec<f64>, half_widths: Vec<f64>) -> Result<Self> {
        let rows: Vec<(f64, f64)> = dts.iter().copied().zip(errors.iter().copied()).collect();
        let (slope, intercept) = fit_loglog_slope(&rows)?;
        Ok(Self {
            dts,
            errors,
            half_widths,
            slope,
            intercept,
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.dts
            .iter()
            .zip(&self.errors)
            .zip(&self.half_widths)
            .map(|((&d, &e), &h)| (d, e, h))
    }
}

/// Ordinary least squares of `ln(error)` on `ln(dt)`; returns `(slope, intercept)`.
pub fn fit_loglog_slope(rows: &[(f64, f64)]) -> Result<(f64, f64)> {
    if rows.len() < 2 {
        return Err(CirError::DegenerateFit(format!("{} rows, need at least 2", rows.len())));
    }
    if let Some(&(dt, err)) = rows.iter().find(|&&(dt, err)| !(dt > 0.0 && err > 0.0)) {
        return Err(CirError::DegenerateFit(format!(
            "non-positive row (dt = {dt:e}, error = {err:e})"
        )));
    }
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(CirError::DegenerateFit("all step sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeakMoment {
    #[default]
    First,
    Second,
}

/// How the scheme's moment at `T` is obtained for the weak-error ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakEstimator {
    /// Closed-form moment recurrences; no sampling, zero half-widths.
    Analytic,
    /// Plain sample moment, one independent noise family per rung.
    Independent,
    /// Sample moment with a coupled fine-step control variate: each rung is
    /// driven by block sums of one fine Brownian path at
    /// `min(dt) / ref_factor`, and the fine scheme's moment, known in closed
    /// form, is added back. Unbiased, with the common sampling noise removed.
    Coupled { ref_factor: usize },
}

impl Default for WeakEstimator {
    fn default() -> Self {
        Self::Coupled { ref_factor: 16 }
    }
}

fn validate_ladder(dts: &[f64], horizon: f64) -> Result<Vec<usize>> {
    if dts.is_empty() {
        return Err(CirError::InvalidConfig("empty step-size ladder".into()));
    }
    if dts.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(CirError::InvalidConfig("step sizes must be strictly decreasing".into()));
    }
    dts.iter().map(|&dt| steps_for(horizon, dt)).collect()
}

fn check_resolved(half_widths: &[f64], errors: &[f64], n_paths: usize) -> Result<()> {
    if half_widths.iter().zip(errors).all(|(h, e)| h >= e) {
        return Err(CirError::InsufficientPaths(format!(
            "with {n_paths} paths the confidence half-width exceeds the error at every rung"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn weak_error_ladder(
    p: &CirParams,
    theta: f64,
    dts: &[f64],
    n_paths: usize,
    horizon: f64,
    moment: WeakMoment,
    estimator: WeakEstimator,
    seed: u64,
) -> Result<ErrorLadder> {
    let steps = validate_ladder(dts, horizon)?;
    let x0 = p.x0();
    let exact = match moment {
        WeakMoment::First => exact_mean(p, x0, horizon),
        WeakMoment::Second => exact_second_moment(p, x0, x0 * x0, horizon)?,
    };
    let closed_form = |theta: f64, dt: f64, n: usize| -> Result<f64> {
        let a = theta_coefficients(p, theta, dt)?;
        match moment {
            WeakMoment::First => Ok(a.numerical_mean(n as u64, x0)),
            WeakMoment::Second => a.numerical_second_moment(n as u64, x0, x0 * x0),
        }
    };
    if estimator != WeakEstimator::Analytic && n_paths < MIN_LADDER_PATHS {
        return Err(CirError::InsufficientPaths(format!(
            "{n_paths} paths; error ladders need at least {MIN_LADDER_PATHS}"
        )));
    }

    let (errors, half_widths): (Vec<f64>, Vec<f64>) = match estimator {
        WeakEstimator::Analytic => {
            let mut errors = Vec::with_capacity(dts.len());
            for (&dt, &n) in dts.iter().zip(&steps) {
                let a = theta_coefficients(p, theta, dt)?;
                let err = match moment {
                    WeakMoment::First => a.mean_error(n as u64, x0),
                    WeakMoment::Second => a.second_moment_error(n as u64, x0, x0 * x0)?,
                };
                errors.push(err.abs());
            }
            let zeros = vec![0.0; errors.len()];
            (errors, zeros)
        }
        WeakEstimator::Independent => {
            let mut rows = Vec::with_capacity(dts.len());
            for (rung, (&dt, &n)) in dts.iter().zip(&steps).enumerate() {
                let cfg = SchemeConfig::new(theta, dt, n);
                let trace = sample_moments_on_level(p, &cfg, n_paths, &[horizon], seed, rung as u32 + 1)?;
                let (est, hw) = match moment {
                    WeakMoment::First => (trace.sample_mean[0], trace.mean_half_widths[0]),
                    WeakMoment::Second => (trace.sample_second_moment[0], trace.second_half_widths[0]),
                };
                rows.push(((est - exact).abs(), hw));
            }
            rows.into_iter().unzip()
        }
        WeakEstimator::Coupled { ref_factor } => {
            let ref_dt = dts[dts.len() - 1] / ref_factor as f64;
            let ref_steps = steps_for(horizon, ref_dt)?;
            let reference = closed_form(theta, ref_dt, ref_steps)?;
            let stats = coupled_rung_statistics(p, theta, theta, dts, ref_factor, n_paths, horizon, seed)?;
            stats
                .iter()
                .map(|s| {
                    let (gap, hw) = match moment {
                        WeakMoment::First => (s.mean_gap, s.mean_gap_half_width),
                        WeakMoment::Second => (s.second_gap, s.second_gap_half_width),
                    };
                    ((gap + reference - exact).abs(), hw)
                })
                .unzip()
        }
    };
    if estimator != WeakEstimator::Analytic {
        check_resolved(&half_widths, &errors, n_paths)?;
    }
    ErrorLadder::from_rows(dts.to_vec(), errors, half_widths)
}

/// Pathwise comparison of one ladder rung against the fine reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RungStatistics {
    pub dt: f64,
    /// `mean |X_dt(T) - X_ref(T)|`.
    pub strong_error: f64,
    pub strong_half_width: f64,
    /// `mean (X_dt(T) - X_ref(T))`.
    pub mean_gap: f64,
    pub mean_gap_half_width: f64,
    /// `mean (X_dt(T)^2 - X_ref(T)^2)`.
    pub second_gap: f64,
    pub second_gap_half_width: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct RungSums {
    abs: SampleSums,
    gap: SampleSums,
    gap2: SampleSums,
}

/// Simulates every rung and a fine reference at `min(dts) / ref_factor` on
/// one Brownian path per sample. Rung increments are left-to-right sums of
/// the reference increments, matching [`crate::CoupledIncrements`].
#[allow(clippy::too_many_arguments)]
pub fn coupled_rung_statistics(
    p: &CirParams,
    theta: f64,
    ref_theta: f64,
    dts: &[f64],
    ref_factor: usize,
    n_paths: usize,
    horizon: f64,
    seed: u64,
) -> Result<Vec<RungStatistics>> {
    validate_ladder(dts, horizon)?;
    if ref_factor == 0 || !ref_factor.is_power_of_two() {
        return Err(CirError::InvalidConfig(format!(
            "reference factor must be a power of two, got {ref_factor}"
        )));
    }
    if n_paths < 2 {
        return Err(CirError::InsufficientPaths(format!("{n_paths} paths")));
    }
    let ref_dt = dts[dts.len() - 1] / ref_factor as f64;
    let ref_steps = steps_for(horizon, ref_dt)?;
    let reference = ThetaMilstein::new(p, &SchemeConfig::new(ref_theta, ref_dt, ref_steps))?;
    let mut masks = Vec::with_capacity(dts.len());
    let mut maps = Vec::with_capacity(dts.len());
    for &dt in dts {
        let factor = steps_for(dt, ref_dt)?;
        if factor == 0 || !factor.is_power_of_two() {
            return Err(CirError::InvalidConfig(format!(
                "step {dt} is not a power-of-two multiple of the reference step {ref_dt}"
            )));
        }
        masks.push(factor - 1);
        maps.push(ThetaMilstein::new(p, &SchemeConfig::new(theta, dt, ref_steps / factor))?);
    }
    let n_rungs = dts.len();
    let x0 = p.x0();

    let blocks = run_blocks(n_paths, |paths| {
        let mut sums = vec![RungSums::default(); n_rungs];
        let mut states = vec![x0; n_rungs];
        let mut pending = vec![0.0f64; n_rungs];
        for path in paths {
            let mut noise = NoiseStream::new(seed, path as u64, 0, ref_dt)?;
            let mut x_ref = x0;
            states.fill(x0);
            pending.fill(0.0);
            for k in 0..ref_steps {
                let dw = noise.next_increment();
                x_ref = reference.step(k, x_ref, dw)?;
                for r in 0..n_rungs {
                    pending[r] += dw;
                    if (k & masks[r]) == masks[r] {
                        states[r] = maps[r].step(k >> masks[r].count_ones(), states[r], pending[r])?;
                        pending[r] = 0.0;
                    }
                }
            }
            for r in 0..n_rungs {
                let d = states[r] - x_ref;
                sums[r].abs.push(d.abs());
                sums[r].gap.push(d);
                sums[r].gap2.push(states[r] * states[r] - x_ref * x_ref);
            }
        }
        Ok(sums)
    })?;

    let mut total = vec![RungSums::default(); n_rungs];
    for b in &blocks {
        for (t, s) in total.iter_mut().zip(b) {
            t.abs.merge(&s.abs);
            t.gap.merge(&s.gap);
            t.gap2.merge(&s.gap2);
        }
    }
    Ok(dts
        .iter()
        .zip(&total)
        .map(|(&dt, s)| RungStatistics {
            dt,
            strong_error: s.abs.mean(n_paths),
            strong_half_width: s.abs.half_width(n_paths),
            mean_gap: s.gap.mean(n_paths),
            mean_gap_half_width: s.gap.half_width(n_paths),
            second_gap: s.gap2.mean(n_paths),
            second_gap_half_width: s.gap2.half_width(n_paths),
        })
        .collect())
}

/// Strong errors `mean |X_ref(T) - X_dt(T)|` against a theta = 1 reference at
/// `min(dts) / ref_factor`.
pub fn strong_error_ladder(
    p: &CirParams,
    theta: f64,
    dts: &[f64],
    ref_factor: usize,
    n_paths: usize,
    horizon: f64,
    seed: u64,
) -> Result<ErrorLadder> {
    if n_paths < MIN_LADDER_PATHS {
        return Err(CirError::InsufficientPaths(format!(
            "{n_paths} paths; error ladders need at least {MIN_LADDER_PATHS}"
        )));
    }
    let stats = coupled_rung_statistics(p, theta, REFERENCE_THETA, dts, ref_factor, n_paths, horizon, seed)?;
    let errors: Vec<f64> = stats.iter().map(|s| s.strong_error).collect();
    let half_widths: Vec<f64> = stats.iter().map(|s| s.strong_half_width).collect();
    check_resolved(&half_widths, &errors, n_paths)?;
    ErrorLadder::from_rows(dts.to_vec(), errors, half_widths)
}

/// `2^-lo, ..., 2^-hi`.
pub fn dyadic_ladder(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(-k)).collect()
}
