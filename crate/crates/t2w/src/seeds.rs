//! Counter-based seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(master, purpose, index)`
//! through SHA-256, so adding or reordering consumers never shifts another
//! stream. Purpose tags are short stable strings ("task", "head-train",
//! "diffusion", ...).

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from (master seed, purpose tag, index).
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(purpose.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// A ChaCha stream for the derived seed. ChaCha output is identical across
/// platforms, which is what dataset/checkpoint byte-identity rests on.
pub fn rng_for(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}
