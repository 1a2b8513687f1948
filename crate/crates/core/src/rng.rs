//! Seeded generators and deterministic sub-seed derivation.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded from a master
//! seed plus a list of integer tags, so results never depend on scheduling or
//! on how many draws an unrelated stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Generator = ChaCha8Rng;

/// Stream tags for the independent generators of one training run.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASKS: u64 = 3;
    pub const DATA: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const EVAL: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn generator(seed: u64) -> Generator {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(master: u64, tags: &[u64]) -> Generator {
    generator(derive_seed(master, tags))
}
