//! Wiener increments keyed by `(master_seed, path_index, level)`.
//!
//! Each stream is a ChaCha8 keystream: the key carries the master seed and the
//! level, the ChaCha stream id carries the path index, and the block counter
//! advances with the cursor. Standard normals come from the ziggurat sampler
//! of `rand_distr` and are scaled by `sqrt(dt)`. Recreating a stream with the
//! same key replays the same increments, and distinct paths never share
//! keystream, so ensembles can be split across threads freely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CirError, Result};

const KEY_TAG: &[u8; 20] = b"cir-milstein/wiener\0";

#[derive(Debug, Clone)]
pub struct NoiseStream {
    master_seed: u64,
    path_index: u64,
    level: u32,
    dt: f64,
    sqrt_dt: f64,
    cursor: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    /// `level` separates independent noise families under one master seed
    /// (e.g. rungs of an uncoupled ladder).
    pub fn new(master_seed: u64, path_index: u64, level: u32, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CirError::ParameterDomain {
                name: "dt",
                value: dt,
                requirement: "finite and > 0",
            });
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&master_seed.to_le_bytes());
        key[8..12].copy_from_slice(&level.to_le_bytes());
        key[12..].copy_from_slice(KEY_TAG);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path_index);
        Ok(Self {
            master_seed,
            path_index,
            level,
            dt,
            sqrt_dt: dt.sqrt(),
            cursor: 0,
            rng,
        })
    }

    /// `dW ~ N(0, dt)`.
    #[inline]
    pub fn next_increment(&mut self) -> f64 {
        self.cursor += 1;
        let z: f64 = self.rng.sample(StandardNormal);
        self.sqrt_dt * z
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn level(&self) -> u32 {
        self.level
    }
}

/// Coarse increments built as left-to-right sums of consecutive fine
/// increments, so that a coarse and a fine discretisation follow one
/// Brownian path.
#[derive(Debug, Clone)]
pub struct CoupledIncrements {
    fine: NoiseStream,
    factor: usize,
    horizon: u64,
}

impl CoupledIncrements {
    /// `factor` fine steps per coarse step; at most `fine_horizon` fine
    /// increments are handed out.
    pub fn new(fine: NoiseStream, factor: usize, fine_horizon: u64) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(CirError::InvalidConfig(format!(
                "coarsening factor must be a power of two, got {factor}"
            )));
        }
        Ok(Self {
            fine,
            factor,
            horizon: fine_horizon,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn fine_dt(&self) -> f64 {
        self.fine.dt()
    }

    pub fn coarse_dt(&self) -> f64 {
        self.fine.dt() * self.factor as f64
    }

    pub fn remaining_fine(&self) -> u64 {
        self.horizon.saturating_sub(self.fine.cursor())
    }

    /// Sum of the next `factor` fine increments.
    pub fn coarse_increment(&mut self) -> Result<f64> {
        self.check_available()?;
        let mut sum = 0.0;
        for _ in 0..self.factor {
            sum += self.fine.next_increment();
        }
        Ok(sum)
    }

    /// Writes the next `factor` fine increments into `fine` and returns
    /// their sum, accumulated in the same order as [`Self::coarse_increment`].
    pub fn next_block(&mut self, fine: &mut [f64]) -> Result<f64> {
        assert_eq!(fine.len(), self.factor, "block buffer must hold one coarse step");
        self.check_available()?;
        let mut sum = 0.0;
        for slot in fine.iter_mut() {
            *slot = self.fine.next_increment();
            sum += *slot;
        }
        Ok(sum)
    }

    fn check_available(&self) -> Result<()> {
        if self.remaining_fine() < self.factor as u64 {
            return Err(CirError::StreamExhausted(self.fine.cursor()));
        }
        Ok(())
    }
}
