//! Counter-based random streams.
//!
//! Seeding scheme: a `u64` seed is written little-endian into bytes 0..8 of a
//! 32-byte ChaCha20 key (remaining bytes zero). Independent streams share the
//! key and differ in the 64-bit ChaCha stream id, so their counters never
//! overlap. The key, stream id and word position fully describe the state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha20Rng,
}

/// Serializable snapshot of a stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

fn key(seed: u64) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&seed.to_le_bytes());
    k
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::from_seed(key(seed));
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn seed(&self) -> u64 {
        let k = self.inner.get_seed();
        u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
    }

    pub fn stream(&self) -> u64 {
        self.inner.get_stream()
    }

    /// A fresh stream with the same seed; `stream` must differ from every
    /// other stream in use.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::with_stream(self.seed(), stream)
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed(), stream: self.stream(), word_pos: self.inner.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut r = Rng::with_stream(state.seed, state.stream);
        r.inner.set_word_pos(state.word_pos);
        r
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
