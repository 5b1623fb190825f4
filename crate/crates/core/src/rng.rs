//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// FNV-1a, stable across platforms and toolchains.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream keyed by a base seed and a name, so that a parameter's initial
/// value depends only on `(seed, name)` and not on construction order.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
