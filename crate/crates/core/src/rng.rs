//! Seeded randomness and weight initialization.
//!
//! Every stochastic component takes an explicit generator; nothing reads
//! global state, so runs are reproducible from their seeds alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type SeededRng = ChaCha8Rng;

/// Standard deviation of every initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` draws from `N(0, std^2)`.
pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
