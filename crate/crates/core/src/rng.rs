//! Seed derivation.
//!
//! Every random stream is a ChaCha20 stream keyed by SHA-256 of
//! `(master seed, purpose)` and selected by an index, so record `i` gets the
//! same draws regardless of thread count or processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct StreamFactory {
    key: [u8; 32],
}

impl StreamFactory {
    pub fn new(master_seed: u64, purpose: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"lopub-stream");
        hasher.update(master_seed.to_le_bytes());
        hasher.update((purpose.len() as u64).to_le_bytes());
        hasher.update(purpose.as_bytes());
        StreamFactory { key: hasher.finalize().into() }
    }

    pub fn stream(&self, index: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }
}
