//! Counter-based random streams.
//!
//! Every random draw in training is keyed by `(seed, counters, purpose)`, so a
//! resumed run regenerates exactly the streams an uninterrupted run would use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, counters: &[u64], purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for c in counters {
        h.update(c.to_le_bytes());
    }
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
