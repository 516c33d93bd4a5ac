use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ProtectConfig;
use super::masks::{gen_mask_schedule, MaskSchedule};
use super::noise::{draw_raw, to_pixels};
use super::objective::{momentum_step, FeatureObjective};
use crate::error::{Error, Result};
use crate::nets::FeatureExtractor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceOp {
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "PRO")]
    Pro,
    /// Additive noise in place of a replacement.
    #[serde(rename = "PERTURB")]
    Perturb,
    /// Descent on feature loss plus weighted L1 to the noise image.
    #[serde(rename = "JOINT")]
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Main,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: Phase,
    pub op: TraceOp,
    /// Feature loss before the operation.
    #[serde(rename = "loss")]
    pub feature_loss: f64,
    /// Fraction of pixels replaced at least once, after the operation.
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectionResult {
    pub protected: Tensor,
    pub trace: Vec<TraceRecord>,
    /// Feature loss of the returned image.
    pub final_loss: f64,
    pub constraint_met_at_end: bool,
    pub coverage: f64,
}

/// What a replacement step writes into the masked pixels.
#[derive(Clone, Debug)]
pub(crate) enum Replacement {
    /// `(1 − w)·x + w·η` with `η` the noise image (`w = 1` is the default
    /// method).
    Noise { weight: f64 },
    /// A fixed image.
    Target(Tensor),
    /// No masking: add `amplitude · N(0, 1)` to every pixel.
    Perturb { amplitude: f64 },
}

/// `x_p ⊙ mask + source ⊙ (1 − mask)` for an arbitrary binary mask.
pub fn apply_mask(x_p: &Tensor, mask: &Tensor, source: &Tensor) -> Result<Tensor> {
    x_p.expect_same_shape("apply_mask", mask)?;
    x_p.expect_same_shape("apply_mask", source)?;
    let data = x_p
        .data()
        .iter()
        .zip(mask.data())
        .zip(source.data())
        .map(|((x, m), s)| x * m + s * (1.0 - m))
        .collect();
    Tensor::new(x_p.shape().to_vec(), data)
}

/// `x_p ⊙ M_j + source ⊙ (1 − M_j)` with `M_j` the schedule's current mask,
/// then advance the cursor.
pub fn partial_replacement_op(x_p: &Tensor, schedule: &mut MaskSchedule, source: &Tensor) -> Result<Tensor> {
    let mut out = x_p.clone();
    replace_in_place(&mut out, schedule, source)?;
    Ok(out)
}

fn replace_in_place(x: &mut Tensor, schedule: &mut MaskSchedule, source: &Tensor) -> Result<()> {
    x.expect_same_shape("partial_replacement_op", source)?;
    if x.shape() != schedule.shape() {
        return Err(Error::shape(
            "partial_replacement_op",
            format!("schedule is for {:?}, image is {:?}", schedule.shape(), x.shape()),
        ));
    }
    let [c, h, w] = schedule.shape();
    let src = source.data();
    let data = x.data_mut();
    for &p in schedule.replaced(schedule.cursor()) {
        for ch in 0..c {
            data[ch * h * w + p] = src[ch * h * w + p];
        }
    }
    schedule.advance();
    Ok(())
}

struct Coverage {
    seen: Vec<bool>,
    count: usize,
}

impl Coverage {
    fn new(n: usize) -> Self {
        Self {
            seen: vec![false; n],
            count: 0,
        }
    }

    fn mark(&mut self, pixels: &[usize]) {
        for &p in pixels {
            if !std::mem::replace(&mut self.seen[p], true) {
                self.count += 1;
            }
        }
    }

    fn fraction(&self) -> f64 {
        self.count as f64 / self.seen.len() as f64
    }
}

pub(crate) struct Runner<'a> {
    x: &'a Tensor,
    objective: FeatureObjective<'a>,
    config: &'a ProtectConfig,
    replacement: Replacement,
}

impl<'a> Runner<'a> {
    pub(crate) fn new(
        x: &'a Tensor,
        model: &'a FeatureExtractor,
        config: &'a ProtectConfig,
        replacement: Replacement,
    ) -> Result<Self> {
        config.validate()?;
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image to protect must lie in [0, 1]"));
        }
        if let Replacement::Target(t) = &replacement {
            x.expect_same_shape("protect", t)?;
        }
        Ok(Self {
            x,
            objective: FeatureObjective::new(model, x, config.normalized_features)?,
            config,
            replacement,
        })
    }

    pub(crate) fn run(&self) -> Result<ProtectionResult> {
        let cfg = self.config;
        let shape = self.x.shape().to_vec();
        let mut schedule = gen_mask_schedule(&shape, cfg.i, cfg.mask_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let mut eta = to_pixels(&draw_raw(&shape, &mut rng), &shape);
        let mut coverage = Coverage::new(shape[1] * shape[2]);
        let mut x_p = self.x.clone();
        let mut g = Tensor::zeros(shape.clone());
        let mut trace = Vec::with_capacity(cfg.t + cfg.init_steps());

        let co = |x_p: &mut Tensor,
                  g: &mut Tensor,
                  step: usize,
                  phase: Phase,
                  trace: &mut Vec<TraceRecord>,
                  cov: f64|
         -> Result<()> {
            let (loss, grad) = self.objective.loss_and_grad(x_p)?;
            let s = momentum_step(x_p, loss, &grad, g, cfg.alpha, cfg.beta, cfg.grad_norm_exponent)?;
            *x_p = s.x_next;
            *g = s.g_next;
            trace.push(TraceRecord {
                step,
                phase,
                op: TraceOp::Co,
                feature_loss: loss,
                coverage: cov,
                stalled: s.stalled,
            });
            Ok(())
        };
        let mut pro = |x_p: &mut Tensor,
                       loss: f64,
                       step: usize,
                       phase: Phase,
                       trace: &mut Vec<TraceRecord>,
                       schedule: &mut MaskSchedule,
                       coverage: &mut Coverage|
         -> Result<()> {
            let op = match &self.replacement {
                Replacement::Noise { weight } => {
                    if cfg.resample_noise {
                        eta = to_pixels(&draw_raw(&shape, &mut rng), &shape);
                    }
                    let source = self.x.zip_map(&eta, |a, n| (1.0 - weight) * a + weight * n)?;
                    coverage.mark(schedule.replaced(schedule.cursor()));
                    replace_in_place(x_p, schedule, &source)?;
                    TraceOp::Pro
                }
                Replacement::Target(t) => {
                    coverage.mark(schedule.replaced(schedule.cursor()));
                    replace_in_place(x_p, schedule, t)?;
                    TraceOp::Pro
                }
                Replacement::Perturb { amplitude } => {
                    for v in x_p.data_mut() {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *v = (*v + amplitude * n).clamp(0.0, 1.0);
                    }
                    TraceOp::Perturb
                }
            };
            trace.push(TraceRecord {
                step,
                phase,
                op,
                feature_loss: loss,
                coverage: coverage.fraction(),
                stalled: false,
            });
            Ok(())
        };

        let init = cfg.init_steps();
        for step in 0..init {
            co(&mut x_p, &mut g, step, Phase::Init, &mut trace, coverage.fraction())?;
            let loss = self.objective.loss(&x_p)?;
            pro(
                &mut x_p,
                loss,
                step,
                Phase::Init,
                &mut trace,
                &mut schedule,
                &mut coverage,
            )?;
        }
        let main_end = init + cfg.main_steps();
        for step in init..main_end {
            // one forward/backward serves both the decision and the CO step
            let (loss, grad) = self.objective.loss_and_grad(&x_p)?;
            if loss >= cfg.epsilon {
                let s = momentum_step(&x_p, loss, &grad, &g, cfg.alpha, cfg.beta, cfg.grad_norm_exponent)?;
                x_p = s.x_next;
                g = s.g_next;
                trace.push(TraceRecord {
                    step,
                    phase: Phase::Main,
                    op: TraceOp::Co,
                    feature_loss: loss,
                    coverage: coverage.fraction(),
                    stalled: s.stalled,
                });
            } else {
                pro(
                    &mut x_p,
                    loss,
                    step,
                    Phase::Main,
                    &mut trace,
                    &mut schedule,
                    &mut coverage,
                )?;
            }
        }
        for step in main_end..cfg.t {
            co(&mut x_p, &mut g, step, Phase::Final, &mut trace, coverage.fraction())?;
        }
        let final_loss = self.objective.loss(&x_p)?;
        Ok(ProtectionResult {
            protected: x_p,
            trace,
            final_loss,
            constraint_met_at_end: final_loss <= cfg.epsilon,
            coverage: coverage.fraction(),
        })
    }
}

/// Alternates constraint operations (descent on the feature distance to
/// `x`) with partial replacements of pixels by a per-image noise image:
/// an initialisation stage of CO+PRO pairs, a main stage choosing CO while
/// the loss is at least `epsilon` and PRO otherwise, and a CO-only tail.
pub fn pixelfade_protect(x: &Tensor, model: &FeatureExtractor, config: &ProtectConfig) -> Result<ProtectionResult> {
    Runner::new(x, model, config, Replacement::Noise { weight: 1.0 })?.run()
}
