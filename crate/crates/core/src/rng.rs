//! Seed plumbing. Every random stream in the crate is a `ChaCha8Rng` derived
//! from an explicit base seed and a tag, so results do not depend on thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Mixes `tag` into `base` with a splitmix64 finalizer.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable stream tags so independent pipeline stages never share a stream.
pub mod tags {
    pub const SOURCE_DATA: u64 = 1;
    pub const TARGET_DATA: u64 = 2;
    pub const NSR_SOURCE: u64 = 3;
    pub const NSR_TARGET: u64 = 4;
    pub const AGENT_SOURCE: u64 = 5;
    pub const AGENT_TARGET: u64 = 6;
    pub const EVAL: u64 = 7;
}
