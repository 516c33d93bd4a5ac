//! Stable seed derivation: `derive_seed(master, ["stage", "item"])` is the
//! first 8 bytes of SHA-256 over the master seed and the labels, so every
//! stage and item draws from an independent, reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed<S: AsRef<str>>(master: u64, labels: impl IntoIterator<Item = S>) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        let l = l.as_ref();
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for<S: AsRef<str>>(master: u64, labels: impl IntoIterator<Item = S>) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}
