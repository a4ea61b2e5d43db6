//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from `(root seed, label)` through SHA-256, so streams never overlap
//! and parallel execution cannot change a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a child seed from a root seed and a list of labelled coordinates.
pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A named sub-stream of `seed`.
pub fn named_stream(seed: u64, name: &str) -> StreamRng {
    stream(derive_seed(seed, &[name]))
}
