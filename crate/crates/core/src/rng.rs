//! Deterministic, independently seekable random streams.
//!
//! Every consumer of randomness owns an [`RngStream`] built from the run seed
//! and a stream id. ChaCha8 keeps a separate 64-bit stream counter, so two
//! ids under the same seed never share keystream, and results do not depend
//! on which thread happens to draw from which stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

pub fn make_rng(seed: u64, stream_id: u64) -> RngStream {
    let mut inner = ChaCha8Rng::seed_from_u64(seed);
    inner.set_stream(stream_id);
    RngStream {
        seed,
        stream_id,
        inner,
    }
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::gen_range(&mut self.inner, 0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
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

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// What a stream is used for. Part of the derived stream id so that, e.g.,
/// buffer shuffling never consumes draws meant for rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Warmup = 2,
    Prompts = 3,
    Rollout = 4,
    Shuffle = 5,
    Kl = 6,
    Eval = 7,
    Oracle = 8,
}

/// Stream id for `(purpose, iteration, index)`; bijective over
/// iteration < 2^32 and index < 2^24.
pub fn stream_id(purpose: Purpose, iteration: u64, index: u64) -> u64 {
    debug_assert!(iteration < 1 << 32 && index < 1 << 24);
    ((purpose as u64) << 56) | (iteration << 24) | index
}
