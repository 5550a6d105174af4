//! Counter-based, splittable random streams.
//!
//! Output `i` of a stream keyed by `seed` is `mix(seed + (i + 1)·γ)` where `mix` is the
//! SplitMix64 finalizer and γ the golden-ratio increment. Output therefore depends only
//! on `(seed, counter)`, and a child stream is another key derived from the parent key,
//! its counter and a label.

use rand::Rng;
use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const ALGORITHM_ID: &str = "splitmix64-counter-v1";

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn algorithm_id(&self) -> &'static str {
        ALGORITHM_ID
    }

    /// Value at an absolute counter position, without touching the stream.
    #[inline]
    pub fn peek(&self, counter: u64) -> u64 {
        mix64(
            self.seed
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)),
        )
    }

    fn derive(&self, tag: u64) -> Self {
        let k = mix64(self.seed ^ mix64(tag ^ 0x6a09_e667_f3bc_c909));
        Self::new(mix64(k ^ self.counter.wrapping_mul(GAMMA)))
    }

    /// Child stream named by a text label. Does not advance `self`.
    pub fn split(&self, label: &str) -> Self {
        self.derive(label_hash(label))
    }

    /// Child stream named by an index. Does not advance `self`.
    pub fn split_index(&self, index: u64) -> Self {
        self.derive(mix64(index ^ 0x3c6e_f372_fe94_f82b))
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        let v = self.peek(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
