//! Counter-based random streams.
//!
//! Every random draw in a run is a pure function of `(seed, domain,
//! iteration, index)`, so a run can be replayed from any iteration without
//! carrying generator state around. The mixing function is the SplitMix64
//! finalizer.

use rand_core::{impls, RngCore};
use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Separates the streams a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u64)]
pub enum Domain {
    InitPixels = 0x1001,
    Crops = 0x2002,
    Noise = 0x3003,
    Test = 0xF00F,
}

/// `draw(seed, domain, iteration, index)` as a single 64-bit value.
#[inline]
pub fn draw(seed: u64, domain: Domain, iteration: u64, index: u64) -> u64 {
    let base = mix64(seed ^ mix64(domain as u64));
    mix64(mix64(base ^ iteration) ^ index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicStream {
    seed: u64,
    domain: Domain,
    iteration: u64,
    index: u64,
}

impl DeterministicStream {
    pub fn new(seed: u64, domain: Domain, iteration: u64) -> Self {
        Self {
            seed,
            domain,
            iteration,
            index: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Number of 64-bit draws consumed so far.
    pub fn position(&self) -> u64 {
        self.index
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for DeterministicStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = draw(self.seed, self.domain, self.iteration, self.index);
        self.index += 1;
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
