//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers (run seed,
//! iteration, kernel id, ...) so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Fresh generator for a key tuple.
pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Stream tags, so that different consumers of the same run seed never share
/// a stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DATA_ORDER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const STRATEGY: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SHOTS: u64 = 7;
    pub const INJECT: u64 = 8;
}
