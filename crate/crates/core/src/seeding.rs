//! Seeded random streams.
//!
//! All randomness flows through [`SimRng`] (ChaCha8), whose output is
//! identical across platforms. Parallel workers derive their seeds with
//! [`substream_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// 2⁶⁴ / φ, the usual golden-ratio increment.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Seed of worker `index` derived from `base`.
pub fn substream_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA))
}
