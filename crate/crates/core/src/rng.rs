//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] derived from a
//! master seed and a stream tag, so subsystems (data order, parameter init,
//! box augmentation, bank sampling, ...) consume independent streams and
//! enabling one subsystem never shifts another's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are arbitrary but frozen: changing them changes every
/// seeded run.
pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const DATA_ORDER: u64 = 0x02;
    pub const RPN_SAMPLE: u64 = 0x03;
    pub const ROI_SAMPLE: u64 = 0x04;
    pub const AUGMENT: u64 = 0x05;
    pub const BANK_SAMPLE: u64 = 0x06;
    pub const SCENE: u64 = 0x10;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive the RNG for `(seed, tag)`.
pub fn rng_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)))
}

/// Derive a per-item stream, e.g. one RNG per generated scene.
pub fn rng_substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag) ^ splitmix64(index.wrapping_add(1))))
}
