//! Seeded random sources shared by weight initialization and calibration.
//!
//! Everything is driven by a SplitMix64 stream so that a `(seed, shape)` pair
//! always reproduces the same values within this implementation.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derive an independent stream for a sub-task (a batch, a layer) from a parent seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // One SplitMix64 finalizer round over the combined value.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect()
}
