//! Seed handling shared by every stochastic component.
//!
//! All randomness flows from explicit `u64` seeds through [`ChaCha8Rng`],
//! whose output stream is fixed across platforms and crate versions.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Mixes a seed with a stream index into a fresh
/// 64-bit seed; distinct `(seed, stream)` pairs give decorrelated outputs.
pub fn mix64(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rng for a named sub-stream of `seed`.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    rng_from(mix64(seed, stream))
}
