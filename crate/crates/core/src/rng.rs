//! Named, seeded random streams.
//!
//! Every stochastic stage draws from a stream derived from the global seed
//! and the stage's name, so reseeding one stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    substream(seed, name, &[])
}

/// Stream for `(seed, name, indices...)`, e.g. one per (epoch, sample).
pub fn substream(seed: u64, name: &str, indices: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
