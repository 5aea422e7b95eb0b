//! Reproducible random streams.
//!
//! Every stream is a xoshiro256++ generator whose 256-bit state is filled
//! by SplitMix64 from a 64-bit key. The key mixes the run seed, a stream tag
//! and an asset index, so each asset draws from its own stream and adding
//! assets never perturbs the draws of earlier ones.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Stream tags. Distinct tags give statistically independent streams for
/// the same seed and index.
pub mod stream {
    pub const POPULATION: u64 = 0x7061_7261_6d73;
    pub const INITIAL_STATE: u64 = 0x696e_6974;
    pub const SAMPLING: u64 = 0x7361_6d70;
}

pub type StreamRng = Xoshiro256PlusPlus;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, tag: u64, index: u64) -> StreamRng {
    let key = mix64(mix64(mix64(seed) ^ tag) ^ index);
    Xoshiro256PlusPlus::seed_from_u64(key)
}

/// Uniform draw on `[min(a, b), max(a, b))`; a point mass when `a == b`.
pub fn uniform(rng: &mut StreamRng, a: f64, b: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}
