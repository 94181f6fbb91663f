//! Seeded random streams.
//!
//! Every consumer of randomness takes an explicit [`RngStream`]; streams for
//! independent purposes are derived from a root seed plus a tag so that adding
//! draws in one place never shifts the draws seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// SplitMix64 finalizer; used to derive well-spread child seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for item `index` of the family identified by `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// A stream for `(seed, tag)`. Distinct tags give independent streams.
pub fn stream(seed: u64, tag: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream tags used across the crate.
pub mod tags {
    pub const SPLIT: u64 = 1;
    pub const HALVE: u64 = 2;
    pub const RESET: u64 = 3;
    pub const BEHAVIOR: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const ABLATION: u64 = 8;
}
