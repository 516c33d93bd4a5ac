use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AD_MIN_SAMPLES: usize = 8;

/// `ln Φ(z)` and `ln(1 − Φ(z))` via `erfc`, which keeps both tails accurate.
fn ln_cdf_pair(z: f64) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let lower = 0.5 * libm::erfc(-z * s);
    let upper = 0.5 * libm::erfc(z * s);
    (lower.max(f64::MIN_POSITIVE).ln(), upper.max(f64::MIN_POSITIVE).ln())
}

/// Anderson–Darling normality statistic with mean and variance estimated
/// from the sample, including the `1 + 0.75/n + 2.25/n²` correction.
/// Larger values mean further from Gaussian.
pub fn ad_statistic(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < AD_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "Anderson-Darling needs at least {AD_MIN_SAMPLES} samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "ad_statistic" });
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::invalid("Anderson-Darling on zero-variance samples"));
    }
    let mut z: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let ln: Vec<(f64, f64)> = z.iter().map(|&v| ln_cdf_pair(v)).collect();
    let s: f64 = (0..n).map(|i| (2 * i + 1) as f64 * (ln[i].0 + ln[n - 1 - i].1)).sum();
    let a2 = -nf - s / nf;
    Ok(a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdMode {
    /// Statistic of each image's flattened pixels, averaged over images.
    #[default]
    PerImage,
    /// One statistic over all pixels of all images.
    Pooled,
}

pub fn image_set_ad(images: &[Tensor], mode: AdMode) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("no images to score"));
    }
    match mode {
        AdMode::PerImage => {
            let mut sum = 0.0;
            for img in images {
                sum += ad_statistic(img.data())?;
            }
            Ok(sum / images.len() as f64)
        }
        AdMode::Pooled => {
            let all: Vec<f64> = images.iter().flat_map(|t| t.data().iter().copied()).collect();
            ad_statistic(&all)
        }
    }
}
