use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which update rule to use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && match self.kind {
                OptimizerKind::Sgd => true,
                OptimizerKind::Momentum { momentum } => (0.0..1.0).contains(&momentum),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First-order optimizer with per-parameter state buffers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new<'a>(config: OptimizerConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        config.validate()?;
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => first.clone(),
            _ => Vec::new(),
        };
        Ok(Self {
            config,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    /// Changes the step size for subsequent steps; moment state is kept.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.config.learning_rate = lr;
        Ok(())
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        self.steps += 1;
        let lr = self.config.learning_rate;
        let t = self.steps as i32;
        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            let g = grads
                .get(i)
                .ok_or_else(|| Error::invalid("fewer gradients than parameters"))?;
            p.expect_same_shape("optimizer", g)?;
            let (pd, gd) = (p.data_mut(), g.data());
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (w, dw) in pd.iter_mut().zip(gd) {
                        *w -= lr * dw;
                    }
                }
                OptimizerKind::Momentum { momentum } => {
                    let vel = self.first[i].data_mut();
                    for ((w, dw), v) in pd.iter_mut().zip(gd).zip(vel.iter_mut()) {
                        *v = momentum * *v + dw;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, dw), mi), vi) in pd.iter_mut().zip(gd).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * dw;
                        *vi = beta2 * *vi + (1.0 - beta2) * dw * dw;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            if pd.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer" });
            }
            n += 1;
        }
        if n != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer built for {} parameters, stepped with {n}",
                self.first.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimise(kind: OptimizerKind, lr: f64) -> f64 {
        // f(w) = (w - 3)^2
        let mut w = vec![Tensor::scalar(0.0)];
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind,
                learning_rate: lr,
            },
            w.iter(),
        )
        .unwrap();
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (w[0].item().unwrap() - 3.0));
            opt.step(w.iter_mut(), &[g]).unwrap();
        }
        w[0].item().unwrap()
    }

    #[test]
    fn all_variants_reach_minimum() {
        assert!((minimise(OptimizerKind::Sgd, 0.1) - 3.0).abs() < 1e-6);
        assert!((minimise(OptimizerKind::Momentum { momentum: 0.9 }, 0.01) - 3.0).abs() < 1e-3);
        assert!((minimise(OptimizerKind::adam(), 0.05) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn state_matches_parameter_shapes() {
        let params = vec![Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![4])];
        let opt = Optimizer::new(OptimizerConfig::adam(1e-3), params.iter()).unwrap();
        for (p, s) in params.iter().zip(&opt.first) {
            assert_eq!(p.shape(), s.shape());
        }
        assert_eq!(opt.second.len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Momentum { momentum: 1.5 },
            learning_rate: 0.1,
        };
        assert!(Optimizer::new(cfg, std::iter::empty()).is_err());
    }
}
