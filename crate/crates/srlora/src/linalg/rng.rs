//! Seeded random source with cheap independent substreams.
//!
//! Every stochastic choice in the crate flows through [`Rng`] so that a run
//! is a pure function of its 64-bit seed. The generator is ChaCha with eight
//! rounds; substreams come from the cipher's stream counter, so `fork` hands
//! out statistically independent sequences without consuming state from the
//! parent. The full generator state round-trips through
//! `(seed, stream, word_pos)`, which is what checkpoints persist.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    /// Fresh generator on substream `stream` of the same seed. Independent
    /// of this generator's position.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position within the stream, for lossless checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Rebuilds a generator at an exact saved position.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Rng {
        let mut rng = Rng::with_stream(seed, stream);
        rng.inner.set_word_pos(word_pos);
        rng
    }

    /// One draw from N(mean, std^2). `std` must be non-negative; a zero
    /// `std` returns `mean` without consuming generator state.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        assert!(std >= 0.0, "standard deviation must be non-negative");
        if std == 0.0 {
            return mean;
        }
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    /// Matrix with i.i.d. N(mean, std^2) entries, filled row-major.
    pub fn gaussian(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, self.normal(mean, std));
            }
        }
        m
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
