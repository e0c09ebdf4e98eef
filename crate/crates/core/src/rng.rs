//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Rng`], a ChaCha8 stream
//! cipher generator (`rand_chacha::ChaCha8Rng`). A generator is keyed by a
//! 64-bit seed through `SeedableRng::seed_from_u64`; independent sub-streams
//! are derived with [`derive_seed`], a SplitMix64 finalizer applied to the
//! parent seed xor a tag. ChaCha output is defined bit-for-bit, so a given
//! seed produces the same stream on every platform.
//!
//! Normal deviates use `rand_distr::StandardNormal` (ziggurat).

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// Sub-stream tags. Keeping them in one place keeps the seed tree auditable.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const DATA: u64 = 0x2;
    pub const NOISE: u64 = 0x3;
    pub const SHUFFLE: u64 = 0x4;
    pub const AUGMENT: u64 = 0x5;
    pub const GRADCHECK: u64 = 0x6;
}

/// SplitMix64 finalizer over `seed ^ tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for the sub-stream `tag` of `seed`.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Self::new(derive_seed(seed, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// He/Kaiming normal initialisation: `N(0, 2 / fan_in)`.
pub fn kaiming_init<T: Scalar>(fan_in: usize, shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape, data).expect("kaiming_init shape")
}
