//! Counter-based random streams.
//!
//! Every random draw in the crate is a pure function of
//! `(seed, domain, index, counter)`. That buys three things:
//!
//! - determinism across runs and platforms (no global state, no wall clock),
//! - structural stream isolation: changing the seed of one domain cannot
//!   perturb draws in another (required by the per-level noise-variation
//!   sampling protocol),
//! - random access: evaluation can shard datapoints across threads or chunk
//!   importance samples without changing any value.
//!
//! The generator is the splitmix64 finalizer applied to a mixed key; it is
//! statistically solid for simulation use and trivially portable.

use alloc::vec::Vec;

/// Domain tags keep unrelated consumers of the same user seed independent.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const BINARIZE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    /// Training-time reparameterization noise; add the level index.
    pub const TRAIN_NOISE: u64 = 16;
    /// Importance-sampling noise; one stream per datapoint.
    pub const IMPORTANCE: u64 = 32;
    pub const SAMPLE_TOP: u64 = 48;
    pub const SAMPLE_MIDDLE: u64 = 49;
    pub const SAMPLE_PIXEL: u64 = 50;
    pub const TOY: u64 = 64;
    pub const PROBE: u64 = 80;
}

#[inline]
fn split(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the stream key for `(seed, domain, index)`.
pub fn derive_key(seed: u64, domain: u64, index: u64) -> u64 {
    split(split(split(seed) ^ domain) ^ index)
}

/// A positioned view into one random stream. Cloning is cheap and the
/// counter can be repositioned freely; `Stream` holds no hidden state.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, domain: u64, index: u64) -> Stream {
        Stream { key: derive_key(seed, domain, index), counter: 0 }
    }

    /// Absolute positioning; draw `counter` is independent of how the
    /// stream reached it.
    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = split(self.key ^ split(self.counter));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Always consumes exactly two raw
    /// draws so counters stay predictable; no spare is cached.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n). Negligible bias for n far below 2^64.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
