//! Single seeded random stream for the whole run.
//!
//! Every stochastic draw in a run (weight init, data shuffling, Gumbel noise,
//! augmentation) comes from one `RunRng`, so a fixed seed reproduces the run
//! bit for bit in single-threaded order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub struct RunRng {
    inner: ChaCha12Rng,
    seed: u64,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        RunRng {
            inner: ChaCha12Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-12);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gumbel(0, 1) sample: -ln(-ln(u)).
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    }

    pub fn gumbel_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.gumbel() as f32).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn coin(&mut self) -> bool {
        self.uniform() < 0.5
    }

    /// Stream position for checkpointing (128-bit word position of ChaCha).
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_word_pos(word_pos);
        RunRng { inner, seed }
    }
}
