//! Seeded, platform-independent random source.
//!
//! Backed by ChaCha8 so a seed yields the same stream on every target.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::DenseVector;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator derived from this one's seed and `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut child = self.clone();
        child.inner.set_stream(stream);
        child.inner.set_word_pos(0);
        child
    }

    /// Uniform on the open interval (0, 1); exact 0 is rejected and 1 is
    /// never produced by the 53-bit generator.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 && u < 1.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// One Gumbel(0, 1) draw, `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform_open())
    }

    /// `n` i.i.d. Gumbel(0, 1) draws.
    pub fn gumbel_sample(&mut self, n: usize) -> DenseVector {
        let v = (0..n).map(|_| self.gumbel()).collect();
        DenseVector::new(v).expect("gumbel draws are finite on (0, 1)")
    }

    pub fn fill_gumbel(&mut self, out: &mut [f64]) {
        for g in out {
            *g = self.gumbel();
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Index drawn with probability proportional to `weights`. Returns
    /// `None` when all weights are zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let target = self.uniform_open() * total;
        let mut acc = 0.0;
        let mut last = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last = Some(i);
                if target < acc {
                    return Some(i);
                }
            }
        }
        last
    }
}

#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}
