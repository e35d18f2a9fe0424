//! Deterministic random streams.
//!
//! Every stream is xoshiro256++ whose 256-bit state is filled by four
//! successive outputs of SplitMix64 started at the 64-bit seed. Uniform reals
//! take the top 53 bits of one output and map them to the open interval
//! `(0, 1)` as `((x >> 11) + 0.5) * 2^-53`, so a draw is never exactly 0 or 1.
//!
//! Substreams are derived as `seed + (index + 1) * 0x9E3779B97F4A7C15`
//! (wrapping), then seeded the same way.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState(Xoshiro256PlusPlus);

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn substream(seed: u64, index: u64) -> Self {
        Self::new(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`, computed as `lo + floor(u * (hi - lo + 1))`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        let span = hi - lo + 1;
        let k = (self.uniform() * span as f64) as usize;
        lo + k.min(span - 1)
    }

    /// Fisher–Yates shuffle driven by [`RngState::int_range`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_range(0, i);
            items.swap(i, j);
        }
    }
}
