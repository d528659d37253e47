//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded by
//! (base seed, purpose tag, index). Streams are independent of thread
//! count and iteration order: parallel code derives one stream per item
//! and collects results positionally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes. Hand-rolled so the hash is stable across
/// platforms and toolchain versions, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes (base, tag, index) into a single 64-bit seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut s = splitmix64(base ^ fnv1a(tag.as_bytes()));
    s = splitmix64(s ^ index);
    s
}

/// A fresh generator for the given (base, tag, index) stream.
pub fn stream(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}
