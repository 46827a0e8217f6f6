//! Seeded randomness. One user seed fans out into independent per-purpose
//! streams so that adding a consumer never shifts another consumer's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable mix of a base seed and a purpose label.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a keeps the label mix stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed for a named stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ splitmix64(label_hash(label)))
}

/// Deterministic RNG for a named stream of a base seed.
pub fn seeded_rng(base: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, label))
}
