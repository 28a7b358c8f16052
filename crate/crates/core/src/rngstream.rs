//! Deterministic named RNG substreams.
//!
//! One root seed drives a whole experiment. Every independent unit of work
//! (a chain, an AIS particle, a pilot draw) gets its own stream derived by
//! hashing `(root, label, index)`, so adding parallel workers or reordering
//! loops never perturbs any other stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child RNG from `(root, label, index)`.
pub fn substream(root: u64, label: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    Rng::from_seed(seed)
}

/// Derives a child seed (for nesting substream families).
pub fn child_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn root(seed: u64) -> Rng {
    substream(seed, "root", 0)
}
