//! Seed derivation. Every random stream in the pipeline is a ChaCha stream
//! keyed by a SHA-256 digest of its coordinates, so results do not depend on
//! iteration order, worker count or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Builds a seed from an ordered list of labelled parts.
#[derive(Clone, Default)]
pub struct SeedPath {
    hasher: Sha256,
}

impl SeedPath {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"elberto/seed");
        hasher.update(seed.to_le_bytes());
        SeedPath { hasher }
    }

    pub fn with_str(mut self, part: &str) -> Self {
        self.hasher.update((part.len() as u64).to_le_bytes());
        self.hasher.update(part.as_bytes());
        self
    }

    pub fn with_u64(mut self, part: u64) -> Self {
        self.hasher.update(8u64.to_le_bytes());
        self.hasher.update(part.to_le_bytes());
        self
    }

    pub fn seed(self) -> u64 {
        let digest = self.hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.seed())
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of arbitrary bytes, used for corpus and config fingerprints.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
