//! CIR parameters, exact moments of the process, and the closed-form moment
//! recurrences of the theta-Milstein scheme.
//!
//! Taking expectations in the one-step map gives the affine recurrences
//!
//! ```text
//! E[X_{n+1}]   = A E[X_n] + B
//! E[X_{n+1}^2] = A^2 E[X_n^2] + D E[X_n] + E
//! ```
//!
//! whose coefficients are collected in [`ThetaAnalysis`]. Everything here is a
//! pure function of value types.

use crate::error::{CirError, Result};

/// How strictly the `theta >= 1` and `4 alpha mu >= sigma^2` requirements are
/// enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Safety {
    /// Reject configurations outside the non-negativity guarantees.
    #[default]
    Strict,
    /// Accept them, and check every simulated state instead.
    Research,
}

/// Model coefficients and deterministic initial value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirParams {
    alpha: f64,
    mu: f64,
    sigma: f64,
    x0: f64,
}

impl CirParams {
    pub fn new(alpha: f64, mu: f64, sigma: f64, x0: f64) -> Result<Self> {
        positive("alpha", alpha)?;
        positive("mu", mu)?;
        positive("sigma", sigma)?;
        if !(x0 >= 0.0 && x0.is_finite()) {
            return Err(CirError::ParameterDomain {
                name: "x0",
                value: x0,
                requirement: "finite and >= 0",
            });
        }
        Ok(Self {
            alpha,
            mu,
            sigma,
            x0,
        })
    }

    /// Maximum-likelihood short-rate fit: alpha=0.43, mu=0.06, sigma=0.15, X0=0.057.
    pub fn par1() -> Self {
        Self {
            alpha: 0.43,
            mu: 0.06,
            sigma: 0.15,
            x0: 0.057,
        }
    }

    /// Boundary case sigma^2 = 4 alpha mu: alpha=0.5, mu=0.5, sigma=1, X0=0.525.
    pub fn par2() -> Self {
        Self {
            alpha: 0.5,
            mu: 0.5,
            sigma: 1.0,
            x0: 0.525,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn with_x0(self, x0: f64) -> Result<Self> {
        Self::new(self.alpha, self.mu, self.sigma, x0)
    }

    /// `4 alpha mu >= sigma^2`: theta-Milstein with `theta >= 1` stays non-negative.
    pub fn milstein_condition(&self) -> bool {
        4.0 * self.alpha * self.mu >= self.sigma * self.sigma
    }

    /// `2 alpha mu >= sigma^2`: the exact solution stays positive from a positive start.
    pub fn feller_condition(&self) -> bool {
        2.0 * self.alpha * self.mu >= self.sigma * self.sigma
    }

    pub fn long_term_mean(&self) -> f64 {
        self.mu
    }

    pub fn long_term_variance(&self) -> f64 {
        self.sigma * self.sigma * self.mu / (2.0 * self.alpha)
    }

    pub fn long_term_second_moment(&self) -> f64 {
        self.mu * self.mu + self.long_term_variance()
    }

    /// Deterministic start: `(x0, x0^2)`.
    pub fn initial_moments(&self) -> InitialMoments {
        InitialMoments::deterministic(self.x0)
    }
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CirError::ParameterDomain {
            name,
            value,
            requirement: "finite and > 0",
        })
    }
}

/// First and second moment of the initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialMoments {
    pub mean: f64,
    pub second: f64,
}

impl InitialMoments {
    pub fn deterministic(x0: f64) -> Self {
        Self {
            mean: x0,
            second: x0 * x0,
        }
    }

    pub fn new(mean: f64, second: f64) -> Result<Self> {
        let m = Self { mean, second };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mean_sq = self.mean * self.mean;
        if self.second < mean_sq || !self.second.is_finite() {
            return Err(CirError::MomentDomain {
                second: self.second,
                mean_sq,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionReport {
    pub feller: bool,
    pub milstein_nonneg: bool,
    pub long_term_mean: f64,
    pub long_term_second_moment: f64,
    pub long_term_variance: f64,
}

pub fn check_conditions(p: &CirParams) -> Result<ConditionReport> {
    // Re-validate: the struct may have been built from a preset.
    let p = CirParams::new(p.alpha, p.mu, p.sigma, p.x0)?;
    let long_term_variance = p.long_term_variance();
    Ok(ConditionReport {
        feller: p.feller_condition(),
        milstein_nonneg: p.milstein_condition(),
        long_term_mean: p.mu,
        long_term_second_moment: p.mu * p.mu + long_term_variance,
        long_term_variance,
    })
}

/// `E[X(t)] = e^{-alpha t} (e0 - mu) + mu`.
pub fn exact_mean(p: &CirParams, e0: f64, t: f64) -> f64 {
    (-p.alpha * t).exp() * (e0 - p.mu) + p.mu
}

/// Exact second moment of the CIR process at time `t`.
pub fn exact_second_moment(p: &CirParams, e0: f64, e0_sq: f64, t: f64) -> Result<f64> {
    InitialMoments::new(e0, e0_sq)?;
    let (alpha, mu, sigma2) = (p.alpha, p.mu, p.sigma * p.sigma);
    let k = 2.0 * mu + sigma2 / alpha;
    Ok(mu * mu
        + sigma2 * mu / (2.0 * alpha)
        + (-2.0 * alpha * t).exp() * (e0_sq + k * (mu / 2.0 - e0))
        + (-alpha * t).exp() * k * (e0 - mu))
}

/// Closed-form coefficients of the scheme's moment recurrences for one
/// `(theta, dt)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaAnalysis {
    pub params: CirParams,
    pub theta: f64,
    pub dt: f64,
    /// `A`: contraction of the mean per step.
    pub contraction: f64,
    /// `1 - A = alpha dt / (1 + alpha theta dt)`, kept separately to avoid
    /// cancellation for small `dt`.
    pub one_minus_contraction: f64,
    /// `B`: constant term of the mean recurrence.
    pub mean_offset: f64,
    /// `D`: weight of `E[X_n]` in the second-moment recurrence.
    pub mean_coupling: f64,
    /// `E`: constant term of the second-moment recurrence.
    pub second_offset: f64,
    /// The theta at which the long-term second moment is reproduced exactly.
    pub theta_star: f64,
    /// Long-term second moment of the scheme minus that of the process.
    pub second_moment_bias: f64,
}

/// Recurrence coefficients; `theta < 1` is rejected under [`Safety::Strict`].
pub fn theta_coefficients(p: &CirParams, theta: f64, dt: f64) -> Result<ThetaAnalysis> {
    theta_coefficients_with(p, theta, dt, Safety::Strict)
}

pub fn theta_coefficients_with(
    p: &CirParams,
    theta: f64,
    dt: f64,
    safety: Safety,
) -> Result<ThetaAnalysis> {
    if !theta.is_finite() || (theta < 1.0 && safety == Safety::Strict) {
        return Err(CirError::UnsupportedTheta(theta));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CirError::ParameterDomain {
            name: "dt",
            value: dt,
            requirement: "finite and > 0",
        });
    }
    let (alpha, mu, sigma2) = (p.alpha, p.mu, p.sigma * p.sigma);
    let denom = 1.0 + alpha * theta * dt;
    let one_minus_contraction = alpha * dt / denom;
    let explicit_part = 1.0 - alpha * dt + alpha * theta * dt;
    Ok(ThetaAnalysis {
        params: *p,
        theta,
        dt,
        contraction: 1.0 - one_minus_contraction,
        one_minus_contraction,
        mean_offset: alpha * mu * dt / denom,
        mean_coupling: (sigma2 + 2.0 * alpha * mu * explicit_part) * dt / (denom * denom),
        second_offset: (8.0 * alpha * alpha * mu * mu + sigma2 * sigma2) * dt * dt
            / (8.0 * denom * denom),
        theta_star: (sigma2 + 4.0 * mu * alpha) / (8.0 * mu * alpha),
        second_moment_bias: sigma2 * (4.0 * mu * alpha * (1.0 - 2.0 * theta) + sigma2) * dt
            / (8.0 * alpha * (2.0 + alpha * dt * (2.0 * theta - 1.0))),
    })
}

impl ThetaAnalysis {
    /// `A^n`, evaluated through `ln(1 - (1 - A))` when `A > 0`.
    pub fn contraction_pow(&self, n: u64) -> f64 {
        if self.contraction > 0.0 {
            (n as f64 * (-self.one_minus_contraction).ln_1p()).exp()
        } else {
            // Only reachable for theta < 1 in research mode.
            self.contraction.powf(n as f64)
        }
    }

    /// `(D mu + E) / (1 - A^2)`, the fixed point of the second-moment recurrence.
    pub fn second_moment_limit(&self) -> f64 {
        let one_minus_a2 = self.one_minus_contraction * (1.0 + self.contraction);
        (self.mean_coupling * self.params.mu + self.second_offset) / one_minus_a2
    }

    /// `A^n (e0 - mu) + mu`.
    pub fn numerical_mean(&self, n: u64, e0: f64) -> f64 {
        self.contraction_pow(n) * (e0 - self.params.mu) + self.params.mu
    }

    /// Closed-form solution of the second-moment recurrence after `n` steps.
    ///
    /// With `L` the fixed point and `u_k = E[X_k^2] - L`,
    /// `u_n = A^{2n} u_0 + D (e0 - mu) A^{n-1} (1 - A^n) / (1 - A)`.
    pub fn numerical_second_moment(&self, n: u64, e0: f64, e0_sq: f64) -> Result<f64> {
        InitialMoments::new(e0, e0_sq)?;
        let limit = self.second_moment_limit();
        if n == 0 {
            return Ok(e0_sq);
        }
        let an = self.contraction_pow(n);
        let an1 = self.contraction_pow(n - 1);
        // (1 - A^n) / (1 - A) without cancellation: -expm1(n ln A) / (1 - A).
        let geometric = if self.contraction > 0.0 {
            -(n as f64 * (-self.one_minus_contraction).ln_1p()).exp_m1()
                / self.one_minus_contraction
        } else {
            (1.0 - an) / self.one_minus_contraction
        };
        Ok(limit
            + an * an * (e0_sq - limit)
            + self.mean_coupling * (e0 - self.params.mu) * an1 * geometric)
    }

    /// `(A^n - e^{-alpha dt n}) (e0 - mu)`: scheme mean minus exact mean at `t = n dt`.
    pub fn mean_error(&self, n: u64, e0: f64) -> f64 {
        let exact_rate = -self.params.alpha * self.dt * n as f64;
        let g = if self.contraction > 0.0 {
            let scheme_rate = n as f64 * (-self.one_minus_contraction).ln_1p();
            exact_rate.exp() * (scheme_rate - exact_rate).exp_m1()
        } else {
            self.contraction_pow(n) - exact_rate.exp()
        };
        g * (e0 - self.params.mu)
    }

    /// Scheme second moment minus exact second moment at `t = n dt`.
    pub fn second_moment_error(&self, n: u64, e0: f64, e0_sq: f64) -> Result<f64> {
        let t = self.dt * n as f64;
        Ok(self.numerical_second_moment(n, e0, e0_sq)?
            - exact_second_moment(&self.params, e0, e0_sq, t)?)
    }
}

pub fn numerical_mean(p: &CirParams, theta: f64, dt: f64, n: u64, e0: f64) -> Result<f64> {
    Ok(theta_coefficients(p, theta, dt)?.numerical_mean(n, e0))
}

pub fn numerical_second_moment(
    p: &CirParams,
    theta: f64,
    dt: f64,
    n: u64,
    e0: f64,
    e0_sq: f64,
) -> Result<f64> {
    theta_coefficients(p, theta, dt)?.numerical_second_moment(n, e0, e0_sq)
}

pub fn mean_error(p: &CirParams, theta: f64, dt: f64, n: u64, e0: f64) -> Result<f64> {
    Ok(theta_coefficients(p, theta, dt)?.mean_error(n, e0))
}

/// `(theta, long-term second-moment bias)` for each theta, in input order.
pub fn second_moment_bias_sweep(
    p: &CirParams,
    thetas: &[f64],
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    thetas
        .iter()
        .map(|&theta| Ok((theta, theta_coefficients(p, theta, dt)?.second_moment_bias)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn iterate_mean(a: &ThetaAnalysis, n: u64, e0: f64) -> f64 {
        (0..n).fold(e0, |m, _| a.contraction * m + a.mean_offset)
    }

    fn iterate_second(a: &ThetaAnalysis, n: u64, e0: f64, e0_sq: f64) -> f64 {
        let (mut m1, mut m2) = (e0, e0_sq);
        for _ in 0..n {
            m2 = a.contraction * a.contraction * m2 + a.mean_coupling * m1 + a.second_offset;
            m1 = a.contraction * m1 + a.mean_offset;
        }
        m2
    }

    #[test]
    fn presets_conditions() {
        let r1 = check_conditions(&CirParams::par1()).unwrap();
        assert!(r1.feller && r1.milstein_nonneg);
        let r2 = check_conditions(&CirParams::par2()).unwrap();
        assert!(!r2.feller && r2.milstein_nonneg);
        assert_eq!(r2.long_term_second_moment, 0.75);
    }

    #[test]
    fn vanishing_noise_conditions() {
        let r = check_conditions(&CirParams::new(1.0, 1.0, 1e-6, 1.0).unwrap()).unwrap();
        assert!(r.feller && r.milstein_nonneg);
        assert_relative_eq!(r.long_term_variance, 5e-13, max_relative = 1e-12);
        assert_relative_eq!(
            r.long_term_second_moment - r.long_term_mean * r.long_term_mean,
            r.long_term_variance,
            epsilon = 4.0 * f64::EPSILON
        );
    }

    #[test]
    fn parameter_domain_errors() {
        assert!(matches!(
            CirParams::new(0.0, 1.0, 1.0, 0.0),
            Err(CirError::ParameterDomain { name: "alpha", .. })
        ));
        assert!(matches!(
            CirParams::new(1.0, -1.0, 1.0, 0.0),
            Err(CirError::ParameterDomain { name: "mu", .. })
        ));
        assert!(matches!(
            CirParams::new(1.0, 1.0, f64::NAN, 0.0),
            Err(CirError::ParameterDomain { name: "sigma", .. })
        ));
        assert!(matches!(
            CirParams::new(1.0, 1.0, 1.0, -1e-12),
            Err(CirError::ParameterDomain { name: "x0", .. })
        ));
    }

    #[test]
    fn exact_mean_values() {
        let p = CirParams::par1();
        assert_eq!(exact_mean(&p, 0.057, 0.0), 0.057);
        // 0.057 e^{-0.43} + 0.06 (1 - e^{-0.43})
        assert_relative_eq!(exact_mean(&p, 0.057, 1.0), 0.058_048_472_715_830, epsilon = 1e-15);
        let far = exact_mean(&p, 0.057, 200.0);
        assert_relative_eq!(far, 0.06, epsilon = 1e-15);
        let ts = [0.5, 1.0, 2.0, 4.0, 8.0];
        let dists: Vec<f64> = ts.iter().map(|&t| (exact_mean(&p, 0.057, t) - 0.06).abs()).collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn exact_second_moment_values() {
        let p = CirParams::par2();
        let x0 = p.x0();
        assert_relative_eq!(exact_second_moment(&p, x0, x0 * x0, 0.0).unwrap(), x0 * x0, epsilon = 1e-15);
        assert_relative_eq!(exact_second_moment(&p, x0, x0 * x0, 100.0).unwrap(), 0.75, epsilon = 1e-14);
        assert!(matches!(
            exact_second_moment(&p, 0.5, 0.2, 1.0),
            Err(CirError::MomentDomain { .. })
        ));
    }

    #[test]
    fn exact_second_moment_matches_moment_ode() {
        // d/dt E[X^2] = (2 alpha mu + sigma^2) E[X] - 2 alpha E[X^2], checked by central differences.
        let p = CirParams::par1();
        let (e0, e2) = (0.057, 0.057 * 0.057 + 1e-4);
        let h = 1e-4;
        for t in [0.1, 1.0, 3.0] {
            let d = (exact_second_moment(&p, e0, e2, t + h).unwrap()
                - exact_second_moment(&p, e0, e2, t - h).unwrap())
                / (2.0 * h);
            let rhs = (2.0 * p.alpha() * p.mu() + p.sigma().powi(2)) * exact_mean(&p, e0, t)
                - 2.0 * p.alpha() * exact_second_moment(&p, e0, e2, t).unwrap();
            assert_relative_eq!(d, rhs, max_relative = 1e-6);
        }
    }

    #[test]
    fn coefficients_at_theta_one() {
        let p = CirParams::par1();
        let a = theta_coefficients(&p, 1.0, 0.125).unwrap();
        assert_relative_eq!(a.contraction, 1.0 / (1.0 + 0.43 * 0.125), epsilon = 1e-16);
        assert_relative_eq!(a.mean_offset / a.one_minus_contraction, p.mu(), max_relative = 4.0 * f64::EPSILON);
    }

    #[test]
    fn theta_star_par2_is_one() {
        let p = CirParams::par2();
        for dt in [0.5, 0.125, 1e-3] {
            let a = theta_coefficients(&p, 1.0, dt).unwrap();
            assert_eq!(a.theta_star, 1.0);
            assert_eq!(a.second_moment_bias, 0.0);
        }
    }

    #[test]
    fn rejects_subunit_theta() {
        let p = CirParams::par1();
        assert_eq!(theta_coefficients(&p, 0.5, 0.1), Err(CirError::UnsupportedTheta(0.5)));
        assert!(theta_coefficients_with(&p, 0.5, 0.1, Safety::Research).is_ok());
        assert!(matches!(
            theta_coefficients(&p, 1.0, 0.0),
            Err(CirError::ParameterDomain { name: "dt", .. })
        ));
    }

    #[test]
    fn numerical_mean_closed_form_matches_iteration() {
        let p = CirParams::par1();
        let a = theta_coefficients(&p, 1.0, 0.125).unwrap();
        assert_eq!(a.numerical_mean(0, 0.057), 0.057);
        let iter = iterate_mean(&a, 8, 0.057);
        assert!((a.numerical_mean(8, 0.057) - iter).abs() <= 10.0 * f64::EPSILON * iter);
        for theta in [1.0, 1.5, 3.0] {
            let a = theta_coefficients(&p, theta, 0.125).unwrap();
            assert_relative_eq!(a.numerical_mean(100_000, 0.057), 0.06, epsilon = 1e-15);
        }
    }

    #[test]
    fn second_moment_limit_par2() {
        let p = CirParams::par2();
        let a = theta_coefficients(&p, 1.0, 0.125).unwrap();
        let x0 = p.x0();
        assert_eq!(a.numerical_second_moment(0, x0, x0 * x0).unwrap(), x0 * x0);
        let m2 = a.numerical_second_moment(2000, x0, x0 * x0).unwrap();
        assert!((m2 - 0.75).abs() < 1e-10);
        assert!((iterate_second(&a, 2000, x0, x0 * x0) - 0.75).abs() < 1e-10);
        assert_relative_eq!(a.second_moment_limit(), 0.75, max_relative = 1e-14);
    }

    #[test]
    fn second_moment_closed_form_matches_iteration() {
        for p in [CirParams::par1(), CirParams::par2()] {
            for theta in [1.0, 1.5, 3.0] {
                let a = theta_coefficients(&p, theta, 0.125).unwrap();
                let x0 = p.x0();
                for n in [1, 2, 7, 120, 1000] {
                    let closed = a.numerical_second_moment(n, x0, x0 * x0).unwrap();
                    let iter = iterate_second(&a, n, x0, x0 * x0);
                    assert_relative_eq!(closed, iter, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn mean_error_identities() {
        let p = CirParams::par1();
        assert_eq!(mean_error(&p, 1.7, 0.125, 33, p.mu()).unwrap(), 0.0);
        let a = theta_coefficients(&p, 1.0, 0.125).unwrap();
        let direct = a.numerical_mean(8, 0.057) - exact_mean(&p, 0.057, 1.0);
        assert_relative_eq!(a.mean_error(8, 0.057), direct, max_relative = 1e-9);
    }

    #[test]
    fn mean_error_minimised_at_theta_one() {
        for p in [CirParams::par1(), CirParams::par2()] {
            for n in [1, 8, 40, 120] {
                let errs: Vec<f64> = (0..9)
                    .map(|k| mean_error(&p, 1.0 + 0.25 * k as f64, 0.125, n, p.x0()).unwrap().abs())
                    .collect();
                assert!(errs.iter().skip(1).all(|&e| e > errs[0]), "{errs:?}");
            }
        }
    }

    #[test]
    fn bias_sweep_signs_and_monotonicity() {
        let thetas = [1.0, 1.5, 2.0, 3.0];
        let par2 = second_moment_bias_sweep(&CirParams::par2(), &thetas, 0.125).unwrap();
        assert_eq!(par2[0], (1.0, 0.0));
        let par1 = second_moment_bias_sweep(&CirParams::par1(), &thetas, 0.125).unwrap();
        assert!(par1.iter().all(|&(_, b)| b < 0.0));
        for sweep in [&par1, &par2] {
            assert!(sweep.windows(2).all(|w| w[1].1 < w[0].1));
        }
    }

    #[test]
    fn bias_matches_fixed_point() {
        for p in [CirParams::par1(), CirParams::par2()] {
            for theta in [1.0, 1.25, 2.0] {
                let a = theta_coefficients(&p, theta, 0.25).unwrap();
                assert_relative_eq!(
                    a.second_moment_limit(),
                    p.long_term_second_moment() + a.second_moment_bias,
                    max_relative = 1e-13
                );
            }
        }
    }

    #[test]
    fn bias_halves_with_step() {
        for (p, theta) in [(CirParams::par1(), 1.0), (CirParams::par1(), 1.5)] {
            let biases: Vec<f64> = (1..=10)
                .map(|k| theta_coefficients(&p, theta, 2f64.powi(-k)).unwrap().second_moment_bias.abs())
                .collect();
            for w in biases.windows(2) {
                let ratio = w[0] / w[1];
                assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
            }
        }
    }
}
