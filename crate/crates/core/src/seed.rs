//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by a 64-bit value derived from
//! the experiment seed and a purpose tag, so that independent consumers
//! (partitioning, selection, init, augmentation) never share a stream and
//! each can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms and toolchains.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    h
}

/// Derives a child seed from a parent seed, a purpose tag and an index.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ hash_str(tag)).wrapping_add(index.wrapping_mul(GOLDEN)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based uniform draw in `[0, 1)`: the `counter`-th value of stream `key`.
#[inline]
pub fn counter_uniform(key: u64, counter: u64) -> f64 {
    let bits = mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
