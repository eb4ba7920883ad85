//! Seeded random streams.
//!
//! Every stream is a PCG-64 (`Lcg128Xsl64`, via `rand_pcg`) keyed by a
//! 64-bit value. A root stream's key is its seed. Child streams are derived
//! from the parent's *key* and a caller-chosen tag, never from the parent's
//! current state, so `split` can be called in any order without changing the
//! children:
//!
//! ```text
//! child_key = splitmix64(parent_key ^ splitmix64(tag + 0x632BE59BD9B4E019))
//! ```
//!
//! Streams are single-owner. Parallel work gets one child per work item.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use crate::error::LinalgError;
use crate::linalg::{Matrix, Vector};

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: Pcg64,
}

impl RngStream {
    pub fn seeded(seed: u64) -> Self {
        Self {
            key: seed,
            inner: Pcg64::seed_from_u64(seed),
        }
    }

    /// The key this stream was created from.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent child stream identified by `tag`.
    pub fn split(&self, tag: u64) -> RngStream {
        let key = splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)));
        RngStream::seeded(key)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `+1.0` or `-1.0` with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn gaussian_vector(&mut self, len: usize, std: f64) -> Vector {
        Vector::from_fn(len, |_| std * self.gaussian())
    }
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut RngStream,
) -> Result<Matrix, LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::InvalidDimension { rows, cols });
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(LinalgError::InvalidScale(std));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| std * rng.gaussian()))
}
