use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub const NOISE_CENTER: f64 = 0.5;
pub const NOISE_SCALE: f64 = 0.25;

pub(crate) fn draw_raw(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub(crate) fn to_pixels(raw: &[f64], shape: &[usize]) -> Tensor {
    let data = raw
        .iter()
        .map(|v| (NOISE_CENTER + NOISE_SCALE * v).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

/// Standard-normal draws before the pixel-domain map.
pub fn sample_noise_raw(shape: &[usize], seed: u64) -> Vec<f64> {
    draw_raw(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `clamp(0.5 + 0.25·v, 0, 1)` for i.i.d. standard-normal `v`.
pub fn sample_noise_target(shape: &[usize], seed: u64) -> Tensor {
    to_pixels(&sample_noise_raw(shape, seed), shape)
}
