//! Seed derivation for reproducible, independent random streams.
//!
//! All randomness in the crate flows through `ChaCha8Rng`, whose output stream
//! is stable across platforms and crate versions and whose position can be
//! saved and restored exactly (needed for checkpoint resume).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG from a base seed and a stream label.
///
/// Distinct labels give statistically independent streams for the same seed,
/// so e.g. training and validation never share state.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derived stream further keyed by an index (per-episode eval RNGs).
pub fn derive_rng_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    derive_rng(seed, &format!("{label}#{index}"))
}
