use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB for images with peak value 1.
/// Identical images give `f64::INFINITY`.
pub fn psnr(reference: &Tensor, candidate: &Tensor) -> Result<f64> {
    reference.expect_same_shape("psnr", candidate)?;
    let mse = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local SSIM over every 8×8 window (stride 1) of every channel of a
/// `(c, h, w)` pair; local statistics use uniform weights and population
/// (co)variances.
pub fn ssim(reference: &Tensor, candidate: &Tensor) -> Result<f64> {
    reference.expect_same_shape("ssim", candidate)?;
    let s = reference.shape();
    if s.len() != 3 {
        return Err(Error::shape("ssim", format!("expected (c, h, w), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (x, y) = (reference.data(), candidate.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        for r0 in 0..=h - SSIM_WINDOW {
            for c0 in 0..=w - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + SSIM_WINDOW {
                    for col in c0..c0 + SSIM_WINDOW {
                        let a = x[off + r * w + col];
                        let b = y[off + r * w + col];
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn psnr_examples() {
        let x = Tensor::full(vec![3, 8, 8], 0.3);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let y = x.map(|v| v + 0.1).unwrap();
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::zeros(vec![3, 8, 8]);
        let o = Tensor::ones(vec![3, 8, 8]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &Tensor::zeros(vec![3, 8, 4])).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = random(vec![3, 16, 12], 1);
        let b = random(vec![3, 16, 12], 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        // values kept away from 0.5 so the inverse is anti-correlated per window
        let c = a.map(|v| if v < 0.5 { v * 0.4 } else { 0.6 + v * 0.4 }).unwrap();
        let inv = c.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&c, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_single_window_hand_computation() {
        // exactly one window per channel: SSIM is the closed form on global stats
        let a = random(vec![1, 8, 8], 3);
        let b = random(vec![1, 8, 8], 4);
        let n = 64.0;
        let ma = a.sum() / n;
        let mb = b.sum() / n;
        let va = a.data().iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = b.data().iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        let (c1, c2) = (1e-4, 9e-4);
        let expect = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(vec![3, 7, 16]);
        assert!(ssim(&a, &a).is_err());
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_scaled_error(seed in 0u64..1000, k in 1.05f64..4.0) {
            let x = random(vec![3, 4, 4], seed).map(|v| 0.25 + 0.5 * v).unwrap();
            let d = random(vec![3, 4, 4], seed + 1).map(|v| (v - 0.5) * 0.1).unwrap();
            let y1 = x.zip_map(&d, |a, b| a + b).unwrap();
            let y2 = x.zip_map(&d, |a, b| a + k * b).unwrap();
            prop_assert!(psnr(&x, &y2).unwrap() < psnr(&x, &y1).unwrap());
        }

        #[test]
        fn ssim_self_is_one(seed in 0u64..1000) {
            let x = random(vec![2, 9, 10], seed);
            prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
