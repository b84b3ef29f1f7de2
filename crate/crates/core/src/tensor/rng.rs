//! Seeded PRNG: ChaCha8 keyed by the 64-bit seed (via `seed_from_u64`),
//! with the 64-bit `stream_id` used as the ChaCha stream (nonce). ChaCha is
//! a counter-based cipher, so every `(seed, stream_id)` pair addresses an
//! independent, platform-independent keystream.
//!
//! This algorithm choice is part of the reproducibility contract; changing
//! it invalidates every stored checkpoint and metric.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Purpose tags. The stream id is `purpose << 56 | sub`, so each purpose
/// owns 2^56 sub-streams (per step, per image, per shard, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Masking = 2,
    TbmNoise = 3,
    Init = 4,
    Eval = 5,
    Corruption = 6,
    Shuffle = 7,
    Theory = 8,
    Probe = 9,
}

impl Stream {
    pub fn id(self, sub: u64) -> u64 {
        ((self as u64) << 56) | (sub & ((1 << 56) - 1))
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn for_purpose(seed: u64, purpose: Stream, sub: u64) -> Self {
        Self::new(seed, purpose.id(sub))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn poisson(&mut self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return 0.0;
        }
        Poisson::new(lambda)
            .expect("positive finite rate")
            .sample(&mut self.inner)
    }

    /// `amount` distinct indices from `0..length`, uniformly without
    /// replacement, in sampling order.
    pub fn choose_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, length, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = Rng::new(42, 7);
        let mut b = Rng::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::new(42, 1);
        let mut b = Rng::new(42, 2);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    // Pins the generator; if this changes every stored artifact is stale.
    #[test]
    fn known_answer() {
        let mut r = Rng::new(0, 0);
        assert_eq!(r.next_u64(), 13_080_132_717_333_068_652);
        assert_eq!(r.normal().to_bits(), 13_817_730_424_566_361_143);
        let mut r = Rng::new(42, 3 << 56);
        assert_eq!(r.next_u64(), 5_904_107_251_359_261_205);
    }

    #[test]
    fn independent_streams_are_uncorrelated() {
        let n = 200_000;
        let mut a = Rng::for_purpose(3, Stream::Data, 0);
        let mut b = Rng::for_purpose(3, Stream::Data, 1);
        let mut sxy = 0.0;
        for _ in 0..n {
            sxy += a.normal() * b.normal();
        }
        let corr = sxy / n as f64;
        // standard error of the sample correlation is 1/sqrt(n)
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn stream_ids_do_not_collide_across_purposes() {
        assert_ne!(Stream::Data.id(5), Stream::Masking.id(5));
        assert_eq!(Stream::Eval.id(0) >> 56, 5);
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(11, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.015);
        assert!((var - 1.0).abs() < 0.02);
    }
}
