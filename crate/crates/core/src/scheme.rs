//! The theta-Milstein one-step map for CIR and path simulation on top of it.
//!
//! The drift is affine, so the implicit part is solved in closed form:
//!
//! ```text
//! X_{n+1} = [ alpha dt (theta - 1) X_n + (alpha mu - sigma^2/4) dt + (sqrt(X_n) + sigma dW / 2)^2 ]
//!           / (1 + alpha theta dt)
//! ```
//!
//! which expands to the usual fully written-out form. The square is kept
//! intact: with `theta >= 1` and `4 alpha mu >= sigma^2` every term in the
//! numerator is non-negative in floating point too.

use crate::error::{CirError, Result};
use crate::model::{CirParams, Safety};
use crate::stochastic::{CoupledIncrements, NoiseStream};
use crate::tolerances::CLAMP_TOLERANCE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub theta: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub safety: Safety,
}

impl SchemeConfig {
    pub fn new(theta: f64, dt: f64, n_steps: usize) -> Self {
        Self {
            theta,
            dt,
            n_steps,
            safety: Safety::Strict,
        }
    }

    pub fn with_safety(mut self, safety: Safety) -> Self {
        self.safety = safety;
        self
    }

    /// Step count covering `[0, horizon]`; `horizon / dt` must be an integer.
    pub fn for_horizon(theta: f64, dt: f64, horizon: f64) -> Result<Self> {
        Ok(Self::new(theta, dt, steps_for(horizon, dt)?))
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self, p: &CirParams) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CirError::ParameterDomain {
                name: "dt",
                value: self.dt,
                requirement: "finite and > 0",
            });
        }
        if !self.theta.is_finite() {
            return Err(CirError::UnsupportedTheta(self.theta));
        }
        if self.safety == Safety::Strict {
            if self.theta < 1.0 {
                return Err(CirError::UnsupportedTheta(self.theta));
            }
            if !p.milstein_condition() {
                return Err(CirError::ConditionViolated {
                    lhs: 4.0 * p.alpha() * p.mu(),
                    rhs: p.sigma() * p.sigma(),
                });
            }
        }
        Ok(())
    }
}

/// Number of steps of size `dt` in `horizon`, if it is an integer.
pub fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(CirError::InvalidConfig(format!(
            "horizon {horizon} and step {dt} must be non-negative and positive"
        )));
    }
    let ratio = horizon / dt;
    let n = ratio.round();
    if (ratio - n).abs() > crate::tolerances::GRID_TOLERANCE * ratio.max(1.0) {
        return Err(CirError::InvalidConfig(format!(
            "horizon {horizon} is not a multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub step: usize,
    pub value: f64,
}

/// One-step map `(state, dW) -> state`: the seam for other schemes.
pub trait OneStepMap: Sync {
    fn dt(&self) -> f64;

    /// `step` is the index of the state being advanced; it is only used in
    /// error reports.
    fn step(&self, step: usize, x: f64, dw: f64) -> Result<f64>;
}

/// Precomputed theta-Milstein map for one parameter set and step size.
#[derive(Debug, Clone, Copy)]
pub struct ThetaMilstein {
    dt: f64,
    inv_denom: f64,
    linear: f64,
    drift: f64,
    half_sigma: f64,
    safety: Safety,
}

impl ThetaMilstein {
    pub fn new(p: &CirParams, cfg: &SchemeConfig) -> Result<Self> {
        cfg.validate(p)?;
        let (alpha, mu, sigma, theta, dt) = (p.alpha(), p.mu(), p.sigma(), cfg.theta, cfg.dt);
        Ok(Self {
            dt,
            inv_denom: 1.0 / (1.0 + alpha * theta * dt),
            linear: alpha * dt * (theta - 1.0),
            drift: (alpha * mu - sigma * sigma / 4.0) * dt,
            half_sigma: sigma / 2.0,
            safety: cfg.safety,
        })
    }

    /// The dW-independent floor `(alpha dt (theta-1) x + (alpha mu - sigma^2/4) dt) / (1 + alpha theta dt)`,
    /// attained at `dW = -2 sqrt(x) / sigma`.
    pub fn lower_bound(&self, x: f64) -> f64 {
        (self.linear * x + self.drift) * self.inv_denom
    }

    #[inline]
    fn raw_step(&self, x: f64, dw: f64) -> f64 {
        let h = x.sqrt() + self.half_sigma * dw;
        (self.linear * x + self.drift + h * h) * self.inv_denom
    }
}

impl OneStepMap for ThetaMilstein {
    fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    fn step(&self, step: usize, x: f64, dw: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(CirError::DomainViolation { step, value: x });
        }
        let next = self.raw_step(x, dw);
        if next >= 0.0 {
            Ok(next)
        } else if next >= -CLAMP_TOLERANCE {
            Ok(0.0)
        } else {
            // Unreachable in strict mode: every numerator term is >= 0 there.
            debug_assert_eq!(self.safety, Safety::Research);
            Err(CirError::DomainViolation {
                step: step + 1,
                value: next,
            })
        }
    }
}

/// A single theta-Milstein step.
pub fn milstein_step(p: &CirParams, cfg: &SchemeConfig, x: f64, dw: f64) -> Result<f64> {
    ThetaMilstein::new(p, cfg)?.step(0, x, dw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub terminal: f64,
    /// Every `record_every`-th state including the initial one; empty when
    /// recording is off.
    pub states: Vec<PathState>,
}

/// Runs `cfg.n_steps` steps from `p.x0()`, consuming one increment per step.
pub fn simulate_path(
    p: &CirParams,
    cfg: &SchemeConfig,
    noise: &mut NoiseStream,
    record_every: Option<usize>,
) -> Result<PathRecord> {
    let map = ThetaMilstein::new(p, cfg)?;
    check_stream_dt(noise.dt(), cfg.dt)?;
    simulate_path_with(&map, p.x0(), cfg.n_steps, noise, record_every)
}

/// Path simulation over any [`OneStepMap`].
pub fn simulate_path_with<M: OneStepMap + ?Sized>(
    map: &M,
    x0: f64,
    n_steps: usize,
    noise: &mut NoiseStream,
    record_every: Option<usize>,
) -> Result<PathRecord> {
    let every = match record_every {
        Some(0) => return Err(CirError::InvalidConfig("record_every must be >= 1".into())),
        other => other,
    };
    let mut states = Vec::new();
    if let Some(k) = every {
        states.reserve(n_steps / k + 1);
        states.push(PathState { step: 0, value: x0 });
    }
    let mut x = x0;
    for n in 0..n_steps {
        x = map.step(n, x, noise.next_increment())?;
        if let Some(k) = every {
            if (n + 1) % k == 0 {
                states.push(PathState {
                    step: n + 1,
                    value: x,
                });
            }
        }
    }
    Ok(PathRecord {
        terminal: x,
        states,
    })
}

/// Runs a coarse and a fine path on one Brownian path; returns
/// `(coarse terminal, fine terminal)`. The fine scheme uses the same theta and
/// safety as the coarse one with `dt / fine_factor`.
pub fn simulate_coupled(
    p: &CirParams,
    cfg_coarse: &SchemeConfig,
    fine_factor: usize,
    noise: &mut CoupledIncrements,
) -> Result<(f64, f64)> {
    if noise.factor() != fine_factor {
        return Err(CirError::InvalidConfig(format!(
            "coupled increments use factor {}, expected {fine_factor}",
            noise.factor()
        )));
    }
    check_stream_dt(noise.coarse_dt(), cfg_coarse.dt)?;
    let coarse = ThetaMilstein::new(p, cfg_coarse)?;
    let fine_cfg = SchemeConfig {
        dt: noise.fine_dt(),
        n_steps: cfg_coarse.n_steps * fine_factor,
        ..*cfg_coarse
    };
    let fine = ThetaMilstein::new(p, &fine_cfg)?;
    let mut buf = vec![0.0; fine_factor];
    let (mut xc, mut xf) = (p.x0(), p.x0());
    for n in 0..cfg_coarse.n_steps {
        let dw = noise.next_block(&mut buf)?;
        for (j, &dwf) in buf.iter().enumerate() {
            xf = fine.step(n * fine_factor + j, xf, dwf)?;
        }
        xc = coarse.step(n, xc, dw)?;
    }
    Ok((xc, xf))
}

fn check_stream_dt(stream_dt: f64, dt: f64) -> Result<()> {
    if (stream_dt - dt).abs() > crate::tolerances::GRID_TOLERANCE * dt {
        return Err(CirError::InvalidConfig(format!(
            "noise stream step {stream_dt} does not match scheme step {dt}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Expanded evaluation with every term written out; independent of the
    /// factored form used by the stepper.
    fn expanded_step(p: &CirParams, theta: f64, dt: f64, x: f64, dw: f64) -> f64 {
        let (a, m, s) = (p.alpha(), p.mu(), p.sigma());
        ((1.0 - a * dt + a * theta * dt) * x
            + (a * m - s * s / 4.0) * dt
            + s * x.sqrt() * dw
            + s * s / 4.0 * dw * dw)
            / (1.0 + a * theta * dt)
    }

    #[test]
    fn vertex_gives_exact_zero_par2() {
        let p = CirParams::par2();
        let cfg = SchemeConfig::new(1.0, 0.125, 1);
        for x in [0.525, 1e-8, 3.7, 0.0] {
            let dw = -2.0 * f64::sqrt(x) / p.sigma();
            assert_eq!(milstein_step(&p, &cfg, x, dw).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_state_zero_noise_par1() {
        let p = CirParams::par1();
        let cfg = SchemeConfig::new(1.0, 0.125, 1);
        let got = milstein_step(&p, &cfg, 0.0, 0.0).unwrap();
        assert_relative_eq!(got, 0.020175 * 0.125 / 1.05375, max_relative = 1e-14);
        assert_relative_eq!(got, 2.39324e-3, max_relative = 1e-5);
    }

    #[test]
    fn noise_free_limit_is_implicit_euler() {
        let p = CirParams::new(0.7, 0.3, 1e-9, 1.2).unwrap();
        for theta in [1.0, 1.5, 2.0] {
            let cfg = SchemeConfig::new(theta, 0.1, 1);
            let x = 1.2;
            let euler = (x + 0.07 * (theta - 1.0) * x + 0.7 * 0.3 * 0.1) / (1.0 + 0.07 * theta);
            assert_relative_eq!(milstein_step(&p, &cfg, x, 0.0).unwrap(), euler, max_relative = 1e-12);
        }
    }

    #[test]
    fn matches_expanded_form() {
        let p = CirParams::par1();
        for &(x, dw) in &[(0.057, 0.1), (0.2, -0.3), (1e-4, 0.01), (0.0, -0.5)] {
            for theta in [1.0, 1.5, 3.0] {
                let cfg = SchemeConfig::new(theta, 0.25, 1);
                assert_relative_eq!(
                    milstein_step(&p, &cfg, x, dw).unwrap(),
                    expanded_step(&p, theta, 0.25, x, dw),
                    max_relative = 1e-12,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn strict_rejects_bad_configs() {
        let p = CirParams::par1();
        assert_eq!(
            milstein_step(&p, &SchemeConfig::new(0.5, 0.1, 1), 0.1, 0.0),
            Err(CirError::UnsupportedTheta(0.5))
        );
        let bad = CirParams::new(0.1, 0.1, 10.0, 0.1).unwrap();
        assert!(matches!(
            milstein_step(&bad, &SchemeConfig::new(1.0, 0.1, 1), 0.1, 0.0),
            Err(CirError::ConditionViolated { .. })
        ));
    }

    #[test]
    fn research_mode_reports_negative_states() {
        let bad = CirParams::new(0.1, 0.1, 10.0, 0.1).unwrap();
        let cfg = SchemeConfig::new(1.0, 0.1, 1).with_safety(Safety::Research);
        let vertex = -2.0 * 0.1f64.sqrt() / 10.0;
        assert!(matches!(
            milstein_step(&bad, &cfg, 0.1, vertex),
            Err(CirError::DomainViolation { step: 1, .. })
        ));
        assert!(matches!(
            milstein_step(&bad, &cfg, -0.1, 0.0),
            Err(CirError::DomainViolation { step: 0, .. })
        ));
        // theta < 1 is allowed to run.
        let p = CirParams::par1();
        let cfg = SchemeConfig::new(0.5, 0.1, 1).with_safety(Safety::Research);
        assert!(milstein_step(&p, &cfg, 0.057, 0.0).unwrap() > 0.0);
    }

    #[test]
    fn zero_steps_returns_x0() {
        let p = CirParams::par1();
        let mut noise = NoiseStream::new(1, 0, 0, 0.125).unwrap();
        let rec = simulate_path(&p, &SchemeConfig::new(1.0, 0.125, 0), &mut noise, Some(1)).unwrap();
        assert_eq!(rec.terminal, p.x0());
        assert_eq!(rec.states, vec![PathState { step: 0, value: p.x0() }]);
    }

    #[test]
    fn path_is_replayable_and_thinned() {
        let p = CirParams::par2();
        let cfg = SchemeConfig::new(1.5, 0.125, 120);
        let run = || {
            let mut noise = NoiseStream::new(9, 17, 0, 0.125).unwrap();
            simulate_path(&p, &cfg, &mut noise, Some(8)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.terminal.to_bits(), b.terminal.to_bits());
        assert_eq!(a.states.len(), 16);
        assert_eq!(a.states.last().unwrap().step, 120);
        assert_eq!(a.states.last().unwrap().value, a.terminal);
        assert!(a.states.iter().all(|s| s.value >= 0.0));
    }

    #[test]
    fn coupled_factor_one_is_identical() {
        let p = CirParams::par1();
        let cfg = SchemeConfig::new(1.0, 0.125, 8);
        let stream = NoiseStream::new(4, 0, 0, 0.125).unwrap();
        let mut c = CoupledIncrements::new(stream, 1, 8).unwrap();
        let (coarse, fine) = simulate_coupled(&p, &cfg, 1, &mut c).unwrap();
        assert_eq!(coarse.to_bits(), fine.to_bits());
    }

    #[test]
    fn coupled_fine_matches_plain_fine_path() {
        let p = CirParams::par1();
        let cfg = SchemeConfig::new(1.0, 0.25, 4);
        let stream = NoiseStream::new(4, 2, 0, 0.25 / 8.0).unwrap();
        let mut c = CoupledIncrements::new(stream.clone(), 8, 32).unwrap();
        let (_, fine) = simulate_coupled(&p, &cfg, 8, &mut c).unwrap();
        let plain = simulate_path(&p, &SchemeConfig::new(1.0, 0.25 / 8.0, 32), &mut stream.clone(), None).unwrap();
        assert_eq!(fine.to_bits(), plain.terminal.to_bits());
        assert!(matches!(
            simulate_coupled(&p, &SchemeConfig::new(1.0, 0.25, 5), 8, &mut CoupledIncrements::new(stream, 8, 32).unwrap()),
            Err(CirError::StreamExhausted(32))
        ));
    }

    #[test]
    fn one_step_conditional_moments() {
        // Averages over 10^6 increments at fixed x against A x + B and A^2 x^2 + D x + E.
        let n = 1_000_000;
        for p in [CirParams::par1(), CirParams::par2()] {
            let (theta, dt, x) = (1.5, 0.125, p.x0());
            let map = ThetaMilstein::new(&p, &SchemeConfig::new(theta, dt, 1)).unwrap();
            let mut noise = NoiseStream::new(123, 0, 0, dt).unwrap();
            let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let y = map.step(0, x, noise.next_increment()).unwrap();
                s1 += y;
                s2 += y * y;
                s4 += y * y * y * y;
            }
            let nf = n as f64;
            let (m1, m2) = (s1 / nf, s2 / nf);
            let a = crate::model::theta_coefficients(&p, theta, dt).unwrap();
            let expect1 = a.contraction * x + a.mean_offset;
            let expect2 = a.contraction.powi(2) * x * x + a.mean_coupling * x + a.second_offset;
            let sd1 = ((m2 - m1 * m1) / nf).sqrt();
            let sd2 = ((s4 / nf - m2 * m2) / nf).sqrt();
            assert!((m1 - expect1).abs() < 4.0 * sd1, "mean {m1} vs {expect1}");
            assert!((m2 - expect2).abs() < 4.0 * sd2, "second {m2} vs {expect2}");
        }
    }

    proptest! {
        #[test]
        fn nonnegative_for_all_increments(
            alpha in 0.01f64..5.0,
            mu in 0.01f64..2.0,
            slack in 0.0f64..1.0,
            theta in 1.0f64..4.0,
            dt in 1e-4f64..1.0,
            x in 0.0f64..5.0,
            u in -1.0f64..1.0,
        ) {
            let sigma = (4.0 * alpha * mu * (1.0 - slack)).sqrt().max(1e-6);
            let p = CirParams::new(alpha, mu, sigma, x).unwrap();
            prop_assume!(p.milstein_condition());
            let cfg = SchemeConfig::new(theta, dt, 1);
            let map = ThetaMilstein::new(&p, &cfg).unwrap();
            let vertex = -2.0 * x.sqrt() / sigma;
            let extremes = 10.0 * dt.sqrt();
            let floor = map.lower_bound(x);
            for dw in [vertex, extremes, -extremes, u * extremes, vertex + u * 1e-3, 0.0] {
                let y = map.step(0, x, dw).unwrap();
                prop_assert!(y >= 0.0);
                prop_assert!(y >= floor - 1e-12 * (1.0 + floor.abs()));
            }
            let at_vertex = map.step(0, x, vertex).unwrap();
            prop_assert!((at_vertex - floor).abs() <= 1e-12 * (1.0 + floor.abs()));
        }
    }
}
