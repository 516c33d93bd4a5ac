use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings of one protection run. Serialises to flat `key = value` TOML
/// whose keys match the field names, with `T` and `I` upper-case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectConfig {
    /// Total iterations, counting each initialisation step once.
    #[serde(rename = "T")]
    pub t: usize,
    /// Number of masks in one replacement cycle.
    #[serde(rename = "I")]
    pub i: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Steps that each run one CO and one PRO. Defaults to `I`.
    pub init_steps: Option<usize>,
    pub final_co_only_steps: usize,
    pub noise_seed: u64,
    pub mask_seed: u64,
    /// Gradients are divided by `‖∇‖₂^p`; `p = 2` is the default, `1` the
    /// unit-direction alternative.
    pub grad_norm_exponent: u32,
    /// Draw a fresh noise image for every replacement.
    pub resample_noise: bool,
    /// Compare unit-normalised embeddings.
    pub normalized_features: bool,
}

impl Default for ProtectConfig {
    fn default() -> Self {
        Self {
            t: 100,
            i: 5,
            epsilon: 0.03,
            alpha: 0.6,
            beta: 0.01,
            init_steps: None,
            final_co_only_steps: 5,
            noise_seed: 0,
            mask_seed: 1,
            grad_norm_exponent: 2,
            resample_noise: false,
            normalized_features: true,
        }
    }
}

impl ProtectConfig {
    pub fn init_steps(&self) -> usize {
        self.init_steps.unwrap_or(self.i)
    }

    pub fn main_steps(&self) -> usize {
        self.t.saturating_sub(self.init_steps() + self.final_co_only_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.i == 0 {
            return bad("I must be at least 1".into());
        }
        if self.init_steps() < self.i {
            return bad(format!(
                "init_steps ({}) must be at least I ({}) so every pixel is replaced",
                self.init_steps(),
                self.i
            ));
        }
        if self.t <= self.init_steps() + self.final_co_only_steps {
            return bad(format!(
                "T ({}) must exceed init_steps + final_co_only_steps ({})",
                self.t,
                self.init_steps() + self.final_co_only_steps
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !matches!(self.grad_norm_exponent, 1 | 2) {
            return bad(format!(
                "grad_norm_exponent must be 1 or 2, got {}",
                self.grad_norm_exponent
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}
