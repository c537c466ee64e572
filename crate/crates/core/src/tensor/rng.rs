//! Reproducible random streams.
//!
//! All randomness in the crate flows through [`SeededRng`], a thin wrapper
//! over ChaCha8 (`rand_chacha`). ChaCha output is specified bit-for-bit, so a
//! given `(seed, stream)` yields the same sequence on every platform.
//! Independent streams for the same seed are obtained with
//! [`SeededRng::substream`], which selects a distinct ChaCha stream id rather
//! than reseeding.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `id` of `seed`. Stream 0 is the stream returned by [`SeededRng::new`].
    pub fn substream(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Box-Muller; consumes two uniforms per call.
    pub fn gaussian(&mut self, mu: f64, sigma: f64) -> f64 {
        let u1 = 1.0 - self.inner.gen::<f64>();
        let u2 = self.inner.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        mu + sigma * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    /// Serializes the full generator position as `seed:stream:word_pos`.
    pub fn state_string(&self) -> String {
        format!(
            "{}:{}:{}",
            self.seed,
            self.inner.get_stream(),
            self.inner.get_word_pos()
        )
    }

    pub fn from_state_string(s: &str) -> Result<Self> {
        let bad = || Error::Format {
            field: "rng".into(),
            detail: format!("malformed rng state {s:?}"),
        };
        let mut parts = s.split(':');
        let seed: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let stream: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let pos: u128 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let mut rng = Self::substream(seed, stream);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}
