//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (corpus generation, parameter init, batch
//! shuffling) asks for its own stream by name, so changing how much one
//! consumer draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// 64-bit seed for substream `name` of `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(substream(root, name))
}
