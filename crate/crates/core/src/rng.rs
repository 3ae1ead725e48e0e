//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! master seed and a tuple of integer keys (layer index, run index, sample
//! index, ...). Work items can then run in any order, on any thread, and
//! still consume exactly the same randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Key domains.
pub mod domain {
    pub const LAYER: u64 = 0x4c41_5945;
    pub const X_ENFORCE: u64 = 0x5845_4e46;
    pub const RUN: u64 = 0x5255_4e00;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHOTS: u64 = 0x5348_4f54;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const SCAN: u64 = 0x5343_414e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed`, producing a child seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, keys))
}
