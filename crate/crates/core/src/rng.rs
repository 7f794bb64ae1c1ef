//! Seeded random streams.
//!
//! Every stochastic component draws from a [`Rng`] derived from a 64-bit seed
//! and a path of indices, so that independent work items get disjoint streams
//! and reordering them does not change any result.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed` with an index path into a child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &i| splitmix(acc ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, path...)`.
pub fn substream(seed: u64, path: &[u64]) -> Rng {
    rng_from_seed(derive_seed(seed, path))
}

/// Uniform draw from `[lo, hi]`; returns `lo` for a point range.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random_bool(p)
    }
}
