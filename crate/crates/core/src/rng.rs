//! Seeded randomness. All stochastic pieces of the crate (weight init,
//! random orthogonal matrices, random permutations, batch shuffling) draw
//! from xoshiro256++ seeded through splitmix64 (`seed_from_u64`), so a
//! 64-bit seed reproduces a run bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::scalar::Real;

pub struct SeededRng(Xoshiro256PlusPlus);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Derive an independent stream for a named component, so e.g. weight
    /// init and transform generation do not share a stream.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut mix = rand_xoshiro::SplitMix64::seed_from_u64(seed ^ tag);
        SeededRng::new(mix.gen())
    }

    /// Standard normal sample. Drawn in f64 and converted, so the stream
    /// is identical for every target float type.
    pub fn normal<T: Real>(&mut self) -> T {
        let x: f64 = self.0.sample(StandardNormal);
        T::from_f64(x).unwrap()
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        v.shuffle(&mut self.0);
    }

    pub fn gen_u64(&mut self) -> u64 {
        self.0.gen()
    }
}

/// Stream tags for `SeededRng::derive`.
pub mod tags {
    pub const WEIGHT_INIT: u64 = 0x5745_4947;
    pub const TRANSFORM: u64 = 0x5452_464d;
    pub const BATCH_ORDER: u64 = 0x4241_5443;
}
