//! Numerical constants shared by the library and its test suites.
//!
//! None of these come from the model itself. They are fixed choices so that
//! every comparison in the crate uses the same threshold.

/// Two-sided 95% normal quantile used for every confidence half-width.
pub const Z_95: f64 = 1.96;

/// Negative step results of at most this magnitude are treated as round-off
/// and clamped to zero.
pub const CLAMP_TOLERANCE: f64 = 1e-30;

/// Relative tolerance when checking that `T / dt` is an integer.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Relative round-off budget for `B / (1 - A) = mu` (in units of epsilon).
pub const IDENTITY_ULPS: f64 = 4.0;

/// Closed form vs. iterated first-moment recurrence (relative).
pub const MEAN_RECURRENCE_REL: f64 = 1e-10;

/// Closed form vs. iterated second-moment recurrence (relative).
pub const SECOND_MOMENT_RECURRENCE_REL: f64 = 1e-8;

/// Smallest ensemble for which a z-based confidence half-width is reported
/// by the error ladders.
pub const MIN_LADDER_PATHS: usize = 30;

/// Paths per work block. Ensemble reductions combine blocks in index order,
/// so results do not depend on how blocks are scheduled over threads.
pub const PATH_BLOCK: usize = 1024;
