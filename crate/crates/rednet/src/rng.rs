//! Seeded random number generation.
//!
//! Everything stochastic in this crate (weight init, shuffling, synthetic
//! data) draws from a ChaCha8 stream keyed by a `u64` seed, so identical
//! seeds reproduce identical runs on any platform. Samples are drawn as
//! `f64` and cast afterwards, keeping the stream independent of the
//! scalar type in use.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// The crate-wide deterministic generator.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample in `[lo, hi)`, drawn in f64.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T {
    T::from_f64(rng.gen_range(lo..hi))
}
