//! Named, splittable counter-based random streams.
//!
//! A stream is identified by `(seed, name)`; its key is the SHA-256 digest of
//! both. Draws come from ChaCha20 keyed by that digest, so every value is a
//! pure function of `(seed, name, sub-stream, word position)`. Sub-streams
//! (`at`) give independent, replayable draws per step or per index without
//! carrying cursor state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    name: String,
    index: u64,
    rng: ChaCha20Rng,
}

/// Serializable position of a stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub name: String,
    pub index: u64,
    /// ChaCha word position, stored as a decimal string (u128).
    pub word_pos: String,
}

fn key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ambientflow-rng\0");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        Self::with_index(seed, name, 0)
    }

    fn with_index(seed: u64, name: &str, index: u64) -> Self {
        let mut rng = ChaCha20Rng::from_seed(key(seed, name));
        rng.set_stream(index);
        Self {
            seed,
            name: name.to_string(),
            index,
            rng,
        }
    }

    /// Independent sub-stream `index` of this stream (e.g. one per training step).
    pub fn at(&self, index: u64) -> Self {
        Self::with_index(self.seed, &self.name, index)
    }

    /// Child stream named `<name>/<child>`.
    pub fn split(&self, child: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.name, child))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cursor(&self) -> RngCursor {
        RngCursor {
            seed: self.seed,
            name: self.name.clone(),
            index: self.index,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_cursor(c: &RngCursor) -> Self {
        let mut s = Self::with_index(c.seed, &c.name, c.index);
        let pos: u128 = c.word_pos.parse().unwrap_or(0);
        s.rng.set_word_pos(pos);
        s
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals<S: Scalar>(&mut self, len: usize) -> Vec<S> {
        (0..len).map(|_| S::of(self.normal())).collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
