//! Simulation of the Cox-Ingersoll-Ross short-rate model
//!
//! ```text
//! dX = alpha (mu - X) dt + sigma sqrt(X) dW
//! ```
//!
//! with the theta-Milstein family of schemes (`theta >= 1`), together with the
//! closed-form moment recurrences of the scheme and the exact moments of the
//! process that serve as oracles for the Monte Carlo harness.
//!
//! Modules, bottom-up:
//!
//! - [`model`]: parameters, validity conditions, exact moments and the
//!   closed-form theta-analysis of the scheme's first two moments.
//! - [`stochastic`]: counter-keyed Wiener increment streams and the
//!   fine/coarse coupling used for pathwise comparisons.
//! - [`scheme`]: the one-step map, path simulation and coupled simulation.
//! - [`montecarlo`]: ensemble moments, weak/strong error ladders and
//!   log-log slope fitting.

pub mod error;
pub mod model;
pub mod montecarlo;
pub mod scheme;
pub mod stochastic;
pub mod tolerances;

pub use error::{CirError, Result};
pub use model::{CirParams, ConditionReport, Safety, ThetaAnalysis};
pub use montecarlo::{ErrorLadder, MomentTrace, WeakEstimator, WeakMoment};
pub use scheme::{OneStepMap, PathState, SchemeConfig, ThetaMilstein};
pub use stochastic::{CoupledIncrements, NoiseStream};
