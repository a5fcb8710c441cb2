//! Deterministic seed derivation for parallel streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The splitmix64 output function.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` of `seed`. Independent of scheduling, so
/// results do not depend on the thread count.
#[inline]
pub fn derive(seed: u64, stream: u64) -> u64 {
    seed ^ splitmix64(stream)
}

/// Seed of sub-stream `(a, b)`, e.g. (replicate, chain).
pub fn derive2(seed: u64, a: u64, b: u64) -> u64 {
    derive(derive(seed, a), b.wrapping_add(0x5851_F42D_4C95_7F2D))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
