//! Seeded random number generation.
//!
//! Every stochastic operation in the crate (initialization, DropFeat masks,
//! synthetic data, shuffling) takes an explicit [`Rng`]. The generator is
//! ChaCha8 keyed by a 64-bit seed, so draw sequences are identical across
//! runs and platforms. Independent streams are derived with [`Rng::fork`],
//! which hashes the parent seed together with a label.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream from `(seed, label)`. Does not advance
    /// `self`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(derive_seed(self.seed, label))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z * std
    }

    /// Normal draw truncated to two standard deviations by resampling.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.inner);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
