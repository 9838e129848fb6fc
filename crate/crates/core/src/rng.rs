//! Seeded random streams.
//!
//! Every run owns a single 64-bit seed. Stages draw from named child streams so
//! that any one stage can be re-run in isolation with identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream names used by the pipeline.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const TRAINING_NOISE: &str = "training-noise";
    pub const FEATURE_NOISE: &str = "feature-noise";
    pub const ATTACKS: &str = "attacks";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    splitmix(seed ^ fnv1a(name.as_bytes()))
}

/// Derives a child seed from a parent seed and an index (shadow models, runs).
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed.wrapping_add(splitmix(index)))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the named child stream of `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    rng_from_seed(child_seed(seed, name))
}
