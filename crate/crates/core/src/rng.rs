//! Counter-based, splittable random streams.
//!
//! A stream is identified by `(master_seed, label, counter)`. The key of the
//! underlying ChaCha generator is a SHA-256 digest of the seed and label, and
//! the counter selects the ChaCha stream, so identical triples always replay
//! the same draws and differently labelled streams never share a key.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    label: String,
    counter: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: impl Into<String>) -> Self {
        Self::with_counter(master_seed, label, 0)
    }

    pub fn with_counter(master_seed: u64, label: impl Into<String>, counter: u64) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(counter);
        Self { master_seed, label, counter, inner }
    }

    /// Child stream labelled `"{label}/{suffix}"`, independent of `self`'s state.
    pub fn derive(&self, suffix: impl std::fmt::Display) -> Self {
        Self::new(self.master_seed, format!("{}/{}", self.label, suffix))
    }

    /// Same label, different counter.
    pub fn at(&self, counter: u64) -> Self {
        Self::with_counter(self.master_seed, self.label.clone(), counter)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform draw from `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..high)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn index(&mut self, upper: usize) -> usize {
        self.inner.random_range(0..upper)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            perm.swap(i, j);
        }
        perm
    }
}
