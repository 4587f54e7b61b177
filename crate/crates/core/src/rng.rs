//! Keyed random streams. Every random decision in a run draws from a stream
//! derived from `(seed, scope, iteration, purpose, index, round)`, so no two
//! consumers share state and a resumed run regenerates identical streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    /// Separates independent sub-runs, e.g. classes of a conditional run.
    pub scope: String,
    pub iteration: usize,
    pub purpose: &'static str,
    pub index: usize,
    pub round: usize,
}

impl StreamKey {
    pub fn new(seed: u64, scope: &str, iteration: usize, purpose: &'static str) -> Self {
        StreamKey {
            seed,
            scope: scope.to_string(),
            iteration,
            purpose,
            index: 0,
            round: 0,
        }
    }

    pub fn at(&self, index: usize, round: usize) -> Self {
        StreamKey {
            index,
            round,
            ..self.clone()
        }
    }

    pub fn with_purpose(&self, purpose: &'static str) -> Self {
        StreamKey {
            purpose,
            ..self.clone()
        }
    }

    /// Canonical text form, also recorded in checkpoints.
    pub fn encode(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}/{}",
            self.seed, self.scope, self.iteration, self.purpose, self.index, self.round
        )
    }

    pub fn rng(&self) -> StreamRng {
        let digest = Sha256::digest(self.encode().as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        StreamRng::from_seed(seed)
    }
}
