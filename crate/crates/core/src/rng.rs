//! Seeded random streams derived by labeled splitting.
//!
//! Each consumer asks for a child stream by label, so adding a new consumer never
//! shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RenRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"ren-root");
        h.update(seed.to_le_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    pub fn child(&self, label: &str) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    pub fn child_indexed(&self, label: &str, index: u64) -> SeedTree {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        SeedTree {
            key: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> RenRng {
        RenRng::from_seed(self.key)
    }
}
