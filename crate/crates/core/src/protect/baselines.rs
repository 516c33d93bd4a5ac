use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ProtectConfig;
use super::noise::sample_noise_target;
use super::objective::{momentum_step, FeatureObjective};
use super::pixelfade::{Phase, ProtectionResult, Replacement, Runner, TraceOp, TraceRecord};
use crate::error::{Error, Result};
use crate::nets::FeatureExtractor;
use crate::tensor::Tensor;

fn image_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(op, format!("expected (c, h, w), got {s:?}"))),
    }
}

/// Index into a half-sample symmetric extension of `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// Separable Gaussian blur with standard deviation `radius / 2`, taps out to
/// `±radius`, and symmetric reflection at the borders.
pub fn gaussian_blur(x: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(x, "gaussian_blur")?;
    if radius == 0 {
        return Err(Error::invalid("blur radius must be positive"));
    }
    if radius > h.min(w) {
        return Err(Error::invalid(format!(
            "blur radius {radius} exceeds image size {h}x{w}"
        )));
    }
    let sigma = radius as f64 / 2.0;
    let r = radius as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        let off = ch * h * w;
        for row in 0..h {
            for col in 0..w {
                tmp[off + row * w + col] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * src[off + row * w + reflect(col as isize + t as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let off = ch * h * w;
        for row in 0..h {
            for col in 0..w {
                out[off + row * w + col] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * tmp[off + reflect(row as isize + t as isize - r, h) * w + col])
                    .sum();
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Replaces each `block × block` tile (clipped at the borders) by its mean.
pub fn mosaic(x: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(x, "mosaic")?;
    if block == 0 {
        return Err(Error::invalid("mosaic block must be positive"));
    }
    if block > h.min(w) {
        return Err(Error::invalid(format!(
            "mosaic block {block} exceeds image size {h}x{w}"
        )));
    }
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        let off = ch * h * w;
        for r0 in (0..h).step_by(block) {
            for c0 in (0..w).step_by(block) {
                let (r1, c1) = ((r0 + block).min(h), (c0 + block).min(w));
                let mut s = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        s += d[off + r * w + col];
                    }
                }
                let m = s / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for col in c0..c1 {
                        d[off + r * w + col] = m;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `clamp(x + amplitude · N(0, 1), 0, 1)` applied once to every value.
pub fn random_perturb(x: &Tensor, amplitude: f64, seed: u64) -> Result<Tensor> {
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::invalid(format!(
            "perturbation amplitude must be positive, got {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + amplitude * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// The alternating schedule with every replacement swapped for additive
/// noise of the given amplitude over the whole image.
pub fn random_perturb_protect(
    x: &Tensor,
    model: &FeatureExtractor,
    amplitude: f64,
    config: &ProtectConfig,
) -> Result<ProtectionResult> {
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::invalid(format!(
            "perturbation amplitude must be positive, got {amplitude}"
        )));
    }
    Runner::new(x, model, config, Replacement::Perturb { amplitude })?.run()
}

/// Momentum descent from `x` on `L_f + weight · mean|x_p − η|` for `T`
/// steps, with the step rule of the constraint operation.
pub fn joint_l1_opt(
    x: &Tensor,
    model: &FeatureExtractor,
    weight: f64,
    config: &ProtectConfig,
) -> Result<ProtectionResult> {
    config.validate()?;
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::invalid(format!("L1 weight must be positive, got {weight}")));
    }
    let objective = FeatureObjective::new(model, x, config.normalized_features)?;
    let eta = sample_noise_target(x.shape(), config.noise_seed);
    let mut x_p = x.clone();
    let mut g = Tensor::zeros(x.shape().to_vec());
    let mut trace = Vec::with_capacity(config.t);
    for step in 0..config.t {
        let (loss, grad) = objective.loss_and_grad_with(&x_p, Some((&eta, weight)))?;
        let s = momentum_step(
            &x_p,
            loss,
            &grad,
            &g,
            config.alpha,
            config.beta,
            config.grad_norm_exponent,
        )?;
        x_p = s.x_next;
        g = s.g_next;
        trace.push(TraceRecord {
            step,
            phase: Phase::Main,
            op: TraceOp::Joint,
            feature_loss: loss,
            coverage: 0.0,
            stalled: s.stalled,
        });
    }
    let final_loss = objective.loss(&x_p)?;
    Ok(ProtectionResult {
        protected: x_p,
        trace,
        final_loss,
        constraint_met_at_end: final_loss <= config.epsilon,
        coverage: 0.0,
    })
}

/// Replacements draw from `(1 − weight)·x + weight·η` instead of `η`.
pub fn noise_weight_protect(
    x: &Tensor,
    model: &FeatureExtractor,
    weight: f64,
    config: &ProtectConfig,
) -> Result<ProtectionResult> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("noise weight must lie in [0, 1], got {weight}")));
    }
    Runner::new(x, model, config, Replacement::Noise { weight })?.run()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTarget {
    /// An image of a different identity.
    OtherIdentity,
    Zero,
    /// The image in `[0, 1]` farthest from `x` per pixel: 1 where `x < 0.5`,
    /// else 0, which maximises `‖x_p − x‖`.
    Contrastive,
}

impl ObjectiveTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::OtherIdentity => "other_identity",
            Self::Zero => "zero",
            Self::Contrastive => "contrastive",
        }
    }
}

/// The default schedule with replacements drawn from another target image.
pub fn objective_variant_protect(
    x: &Tensor,
    model: &FeatureExtractor,
    target: ObjectiveTarget,
    other_identity: Option<&Tensor>,
    config: &ProtectConfig,
) -> Result<ProtectionResult> {
    let image = match target {
        ObjectiveTarget::OtherIdentity => other_identity
            .ok_or_else(|| Error::invalid("other_identity objective needs an image of another identity"))?
            .clone(),
        ObjectiveTarget::Zero => Tensor::zeros(x.shape().to_vec()),
        ObjectiveTarget::Contrastive => x.map(|v| if v < 0.5 { 1.0 } else { 0.0 })?,
    };
    Runner::new(x, model, config, Replacement::Target(image))?.run()
}
