//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id, counter)` and backed by ChaCha20,
//! whose keystream can be positioned directly. Any draw sequence can therefore be
//! replayed from its address alone, independent of thread scheduling or of how
//! many other streams have been consumed.
//!
//! The counter is measured in 64-bit words. `standard_normal(n)` consumes exactly
//! `2 * ceil(n / 2)` words (Box–Muller, one pair of uniforms per pair of normals).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Words reserved per block when a stream is partitioned by iteration.
pub const BLOCK_WORDS: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// Stream positioned at an absolute word counter.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        inner.set_word_pos(u128::from(counter) * 2);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream positioned at the start of block `block` (`block * BLOCK_WORDS`).
    pub fn block(seed: u64, stream_id: u64, block: u64) -> Self {
        Self::at(seed, stream_id, block * BLOCK_WORDS)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 64-bit words consumed since counter 0.
    pub fn counter(&self) -> u64 {
        (self.inner.get_word_pos() / 2) as u64
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `n` i.i.d. N(0, 1) draws.
    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let u1 = self.uniform_open0();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let a = std::f64::consts::TAU * u2;
            out.push(r * a.cos());
            out.push(r * a.sin());
        }
        out.truncate(n);
        out
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(hi >= lo);
        let span = (hi - lo) as u64 + 1;
        // Lemire-style rejection to stay unbiased
        let zone = u64::MAX - (u64::MAX % span);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return lo + (v % span) as i64;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
