//! Seeded RNG streams. Every stochastic operation takes an explicit stream;
//! nothing draws from ambient entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{fnv_bytes, fnv_init, fnv_u64, Scalar, Tensor};

/// The single RNG type used throughout. ChaCha keeps streams portable
/// across platforms.
pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable sub-seed derivation: independent streams for independent purposes
/// (step noise vs augmentation draws vs data shuffling) so consuming one
/// never shifts another.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = fnv_init();
    h = fnv_u64(h, seed);
    h = fnv_bytes(h, tag.as_bytes());
    h
}

pub fn substream(seed: u64, tag: &str) -> Stream {
    stream(derive_seed(seed, tag))
}

/// Standard-normal tensor drawn elementwise in row-major order.
pub fn normal_tensor<S: Scalar>(shape: &[usize], rng: &mut Stream) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            S::from_f64(v)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Uniform in [lo, hi).
pub fn uniform<S: Scalar>(lo: f64, hi: f64, rng: &mut Stream) -> S {
    S::from_f64(rng.gen_range(lo..hi))
}
