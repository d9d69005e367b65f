//! Counter-based random numbers for Monte Carlo rendering.
//!
//! Every draw is addressed by `(seed, pixel, sample, slot, draw)` where slot 0
//! is the camera jitter and slot `k + 1` belongs to path vertex `k`. The
//! stream is a ChaCha8 keystream: the key comes from the seed, the stream id
//! from the pixel, and the word position from `(sample, slot)`, so results do
//! not depend on scheduling or on how many draws other vertices consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Anything that hands out uniform numbers in `[0, 1)`.
pub trait UniformSource {
    fn next_f64(&mut self) -> f64;

    /// Draw and validate that the value lies in `[0, 1)`.
    fn uniform(&mut self) -> Result<f64> {
        let u = self.next_f64();
        if (0.0..1.0).contains(&u) {
            Ok(u)
        } else {
            Err(Error::DegenerateRng(u))
        }
    }
}

const WORDS_PER_SLOT: u128 = 256;
const SLOTS_PER_SAMPLE: u128 = 64;

pub struct PathRng {
    inner: ChaCha8Rng,
    sample: u64,
}

impl PathRng {
    pub fn new(seed: u64, pixel: u64, sample: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(pixel);
        let mut rng = PathRng { inner, sample };
        rng.slot(0);
        rng
    }

    /// Position the stream at the start of `slot` for the current sample.
    pub fn slot(&mut self, slot: u32) {
        let slot = (slot as u128).min(SLOTS_PER_SAMPLE - 1);
        let pos = (self.sample as u128 * SLOTS_PER_SAMPLE + slot) * WORDS_PER_SLOT;
        self.inner.set_word_pos(pos);
    }

    /// Position the stream `draws` 64-bit draws into `slot`.
    pub fn slot_offset(&mut self, slot: u32, draws: u32) {
        self.slot(slot);
        let pos = self.inner.get_word_pos() + 2 * draws as u128;
        self.inner.set_word_pos(pos);
    }
}

impl UniformSource for PathRng {
    fn next_f64(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl UniformSource for ChaCha8Rng {
    fn next_f64(&mut self) -> f64 {
        self.gen::<f64>()
    }
}

/// A plain sequential generator for batch selection and initialization.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
