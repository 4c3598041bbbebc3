//! Deterministic RNG streams.
//!
//! Every random choice in the crate draws from a ChaCha8 stream derived from
//! a user seed plus a fixed salt, so independent pipeline stages (templates,
//! label sampling, weight init, shuffling, ...) never share or perturb each
//! other's streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby (seed, salt) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream for (`seed`, `salt`).
pub fn substream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(salt)))
}
