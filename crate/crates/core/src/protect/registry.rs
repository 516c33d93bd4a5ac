use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::baselines::{
    gaussian_blur, joint_l1_opt, mosaic, noise_weight_protect, objective_variant_protect, random_perturb_protect,
    ObjectiveTarget,
};
use super::config::ProtectConfig;
use super::objective::FeatureObjective;
use super::pixelfade::{pixelfade_protect, ProtectionResult, TraceRecord};
use crate::error::{Error, Result};
use crate::nets::FeatureExtractor;
use crate::tensor::Tensor;

pub const DEFAULT_BLUR_RADIUS: usize = 3;
pub const DEFAULT_MOSAIC_BLOCK: usize = 4;

/// A named protection method. Parses from and prints as `name[:param]`,
/// e.g. `pixelfade`, `gaussian_blur:3`, `noise_weight:0.2`,
/// `objective:contrastive`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Protector {
    PixelFade,
    GaussianBlur { radius: usize },
    Mosaic { block: usize },
    RandomPerturb { amplitude: f64 },
    JointL1 { weight: f64 },
    NoiseWeight { weight: f64 },
    Objective(ObjectiveTarget),
}

impl fmt::Display for Protector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PixelFade => write!(f, "pixelfade"),
            Self::GaussianBlur { radius } => write!(f, "gaussian_blur:{radius}"),
            Self::Mosaic { block } => write!(f, "mosaic:{block}"),
            Self::RandomPerturb { amplitude } => write!(f, "random_perturb:{amplitude}"),
            Self::JointL1 { weight } => write!(f, "joint_l1:{weight}"),
            Self::NoiseWeight { weight } => write!(f, "noise_weight:{weight}"),
            Self::Objective(t) => write!(f, "objective:{}", t.as_str()),
        }
    }
}

impl FromStr for Protector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || Error::Config(format!("invalid protector spec {s:?}"));
        let int = |default: usize| -> Result<usize> {
            match arg {
                None => Ok(default),
                Some(a) => a.parse().map_err(|_| bad()),
            }
        };
        let float = || -> Result<f64> {
            arg.ok_or_else(bad)?
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(bad)
        };
        Ok(match name {
            "pixelfade" if arg.is_none() => Self::PixelFade,
            "gaussian_blur" | "blur" => Self::GaussianBlur {
                radius: int(DEFAULT_BLUR_RADIUS)?,
            },
            "mosaic" => Self::Mosaic {
                block: int(DEFAULT_MOSAIC_BLOCK)?,
            },
            "random_perturb" => Self::RandomPerturb { amplitude: float()? },
            "joint_l1" => Self::JointL1 { weight: float()? },
            "noise_weight" => Self::NoiseWeight { weight: float()? },
            "objective" => Self::Objective(match arg {
                Some("other_identity") => ObjectiveTarget::OtherIdentity,
                Some("zero") => ObjectiveTarget::Zero,
                Some("contrastive") => ObjectiveTarget::Contrastive,
                _ => return Err(bad()),
            }),
            _ => return Err(bad()),
        })
    }
}

impl TryFrom<String> for Protector {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Protector> for String {
    fn from(p: Protector) -> String {
        p.to_string()
    }
}

impl Protector {
    /// A file-system-safe rendering of the name.
    pub fn dir_name(&self) -> String {
        self.to_string().replace(':', "_")
    }

    pub fn needs_other_identity(&self) -> bool {
        matches!(self, Self::Objective(ObjectiveTarget::OtherIdentity))
    }

    /// Protects one image. Pure image filters report an empty trace; their
    /// feature loss is still measured against `model`.
    pub fn apply(
        &self,
        x: &Tensor,
        model: &FeatureExtractor,
        config: &ProtectConfig,
        other_identity: Option<&Tensor>,
    ) -> Result<ProtectionResult> {
        let filtered = |img: Tensor| -> Result<ProtectionResult> {
            let loss = FeatureObjective::new(model, x, config.normalized_features)?.loss(&img)?;
            Ok(ProtectionResult {
                protected: img,
                trace: Vec::new(),
                final_loss: loss,
                constraint_met_at_end: loss <= config.epsilon,
                coverage: 0.0,
            })
        };
        match *self {
            Self::PixelFade => pixelfade_protect(x, model, config),
            Self::GaussianBlur { radius } => filtered(gaussian_blur(x, radius)?),
            Self::Mosaic { block } => filtered(mosaic(x, block)?),
            Self::RandomPerturb { amplitude } => random_perturb_protect(x, model, amplitude, config),
            Self::JointL1 { weight } => joint_l1_opt(x, model, weight, config),
            Self::NoiseWeight { weight } => noise_weight_protect(x, model, weight, config),
            Self::Objective(t) => objective_variant_protect(x, model, t, other_identity, config),
        }
    }
}

pub fn write_trace_jsonl(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
