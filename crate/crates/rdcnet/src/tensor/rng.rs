//! Deterministic random source.
//!
//! Every stochastic feature (init, shuffling, masks, augmentation,
//! synthetic data) draws from a ChaCha8 generator addressed by
//! `(seed, stream, step)`. Stream ids keep the consumers independent:
//! reordering mask draws can never perturb init, and a run is exactly
//! reproducible from its seed.
//!
//! Stream conventions used across the crate:
//!   0 parameter init, 1 epoch shuffling, 2 augmentation, 3 synthetic data,
//!   16+layer for per-layer mask draws.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Rng {
    inner: ChaCha8Rng,
    /// Cached second Box-Muller draw.
    spare_normal: Option<f64>,
}

/// splitmix64 finalizer; decorrelates nearby (seed, step) pairs before
/// they become ChaCha keys.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            spare_normal: None,
        }
    }

    /// Generator for one (stream, step) cell, e.g. the mask draw of layer
    /// `stream` at optimizer step `step`. Independent of how many values
    /// any other cell consumed.
    pub fn for_step(seed: u64, stream: u64, step: u64) -> Self {
        Self::stream(seed ^ mix(step.wrapping_add(1)), stream)
    }

    /// Uniform in [0,1), 24-bit resolution: (next_u32 >> 8) * 2^-24.
    /// Never returns 1.0, so `r < p` with p = 1.0 always holds and with
    /// p = 0.0 never holds.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u32() >> 8) as f64 * (1.0 / (1u64 << 24) as f64)
    }

    /// Standard normal via Box-Muller on (0,1] x [0,1) uniforms.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = 1.0 - self.uniform(); // (0,1], keeps ln finite
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Unbiased integer in [0, n) by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n >= 1, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
