//! Deterministic RNG derivation.
//!
//! Every stochastic operation draws from a ChaCha stream derived from an
//! explicit seed plus a purpose label, so that independent pipeline stages
//! (corpus generation, init, batch shuffling, proxy noise) never share or
//! race on a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash (FNV-1a) used only for seed derivation.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent RNG from a base seed and a purpose label.
pub fn derive(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()))
}

/// Derives an RNG keyed by label plus a numeric index (epoch, sentence, ...).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mixed = fnv1a(label.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha8Rng::seed_from_u64(seed ^ mixed)
}
