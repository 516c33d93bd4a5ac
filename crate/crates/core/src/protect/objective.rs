use crate::error::{Error, Result};
use crate::nets::FeatureExtractor;
use crate::tensor::{Graph, Tensor};

/// Squared embedding distance to a fixed original image, with gradients
/// with respect to the candidate image. The model is never updated.
pub struct FeatureObjective<'m> {
    model: &'m FeatureExtractor,
    reference: Tensor,
    normalized: bool,
}

impl<'m> FeatureObjective<'m> {
    pub fn new(model: &'m FeatureExtractor, original: &Tensor, normalized: bool) -> Result<Self> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(original.clone());
        let e = model.embed_var(&mut g, &bound, x, normalized)?;
        Ok(Self {
            model,
            reference: g.value(e).clone(),
            normalized,
        })
    }

    pub fn model(&self) -> &FeatureExtractor {
        self.model
    }

    pub fn loss(&self, x_p: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let x = g.constant(x_p.clone());
        let e = self.model.embed_var(&mut g, &bound, x, self.normalized)?;
        let r = g.constant(self.reference.clone());
        let l = g.sq_l2_distance(e, r)?;
        g.value(l).item()
    }

    /// The feature loss and the gradient of the feature loss plus
    /// `weight · mean|x_p − target|` when `l1` is given.
    pub fn loss_and_grad_with(&self, x_p: &Tensor, l1: Option<(&Tensor, f64)>) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let x = g.leaf(x_p.clone(), true);
        let e = self.model.embed_var(&mut g, &bound, x, self.normalized)?;
        let r = g.constant(self.reference.clone());
        let feature = g.sq_l2_distance(e, r)?;
        let mut loss = feature;
        if let Some((target, w)) = l1 {
            let t = g.constant(target.clone());
            let d = g.l1_distance(x, t)?;
            let d = g.scale(d, w)?;
            loss = g.add(loss, d)?;
        }
        g.backward(loss)?;
        let value = g.value(feature).item()?;
        let grad = g
            .take_grad(x)
            .ok_or_else(|| Error::invalid("candidate image received no gradient"))?;
        Ok((value, grad))
    }

    pub fn loss_and_grad(&self, x_p: &Tensor) -> Result<(f64, Tensor)> {
        self.loss_and_grad_with(x_p, None)
    }
}

/// One constraint-operation step.
#[derive(Clone, Debug, PartialEq)]
pub struct CoStep {
    pub x_next: Tensor,
    pub g_next: Tensor,
    /// Objective at `x_p`, before the step.
    pub loss: f64,
    /// The gradient was exactly zero; `x_p` and the momentum are unchanged.
    pub stalled: bool,
}

/// `g ← α·g_prev + ∇/‖∇‖₂^p`, then `x ← clamp(x_p − β·g, 0, 1)`.
pub fn momentum_step(
    x_p: &Tensor,
    loss: f64,
    grad: &Tensor,
    g_prev: &Tensor,
    alpha: f64,
    beta: f64,
    exponent: u32,
) -> Result<CoStep> {
    x_p.expect_same_shape("constraint_op", grad)?;
    x_p.expect_same_shape("constraint_op", g_prev)?;
    let norm = grad.norm_l2();
    if norm == 0.0 {
        return Ok(CoStep {
            x_next: x_p.clone(),
            g_next: g_prev.clone(),
            loss,
            stalled: true,
        });
    }
    let inv = 1.0 / norm.powi(exponent as i32);
    let g_next = g_prev.zip_map(grad, |m, d| alpha * m + d * inv)?;
    let x_next = x_p.zip_map(&g_next, |x, g| (x - beta * g).clamp(0.0, 1.0))?;
    Ok(CoStep {
        x_next,
        g_next,
        loss,
        stalled: false,
    })
}

pub fn constraint_op(
    x_p: &Tensor,
    objective: &FeatureObjective,
    g_prev: &Tensor,
    alpha: f64,
    beta: f64,
    exponent: u32,
) -> Result<CoStep> {
    let (loss, grad) = objective.loss_and_grad(x_p)?;
    momentum_step(x_p, loss, &grad, g_prev, alpha, beta, exponent)
}
