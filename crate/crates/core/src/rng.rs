//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a stream tag, so results do not depend on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT_POOL: u64 = 2;
    pub const PARAMS: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const CANDIDATES: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const RANDOM_SELECT: u64 = 7;
    pub const ORACLE: u64 = 8;
    pub const DIAGNOSE: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc.rotate_left(23) ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    rng_from(derive_seed(base, tags))
}
