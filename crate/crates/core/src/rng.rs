//! Seed-derived random streams.
//!
//! Every stochastic step draws from a stream keyed by `(seed, tags...)`, so a
//! result never depends on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub const TAG_NOISE: u64 = 0x6e_6f69_7365;
pub const TAG_MAGNITUDE: u64 = 0x6d61_676e;
pub const TAG_MCMC: u64 = 0x6d63_6d63;
pub const TAG_ASCENT: u64 = 0x6173_6365_6e74;
pub const TAG_TRAIN: u64 = 0x74_7261_696e;
pub const TAG_INIT: u64 = 0x696e_6974;
pub const TAG_REPLICATE: u64 = 0x7265_706c;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag path into a new 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
