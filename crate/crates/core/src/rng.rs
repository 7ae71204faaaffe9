//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit run seed (little
//! endian in the first 8 key bytes, remaining 24 bytes zero) and selected by a
//! 64-bit stream id, so each consumer (data generation, weight init, batch
//! order, feature sampling) draws from its own independent sequence.
//!
//! Conversions, fixed so other implementations can replay fixtures exactly:
//! - uniform: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`
//! - normal: Box–Muller, `sqrt(−2 ln(1 − u₁)) · cos(2π u₂)`, one value per pair
//! - below(n): `floor(uniform · n)`
//! - shuffle: Fisher–Yates from the last index down

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const STREAM_DATA: u64 = 1;
pub const STREAM_BACKBONE: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_ADAPTERS: u64 = 4;
pub const STREAM_BATCHES: u64 = 5;
pub const STREAM_FEATURES: u64 = 6;

#[derive(Clone, Debug)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx
    }
}
