use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::AdMode;
use crate::nets::{ExtractorTrainConfig, RecoveryTrainConfig};
use crate::protect::{ProtectConfig, Protector};
use crate::seeds::derive_seed;
use crate::synth::DatasetConfig;

/// Which side of a retrieval is protected: `P2O` means protected queries
/// searched against an original gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    P2P,
    O2P,
    P2O,
    O2O,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::P2P, Setting::O2P, Setting::P2O, Setting::O2O];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::P2P => "P2P",
            Setting::O2P => "O2P",
            Setting::P2O => "P2O",
            Setting::O2O => "O2O",
        }
    }

    pub fn protected_query(self) -> bool {
        matches!(self, Setting::P2P | Setting::P2O)
    }

    pub fn protected_gallery(self) -> bool {
        matches!(self, Setting::P2P | Setting::O2P)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown setting {s:?}; valid settings are P2P, O2P, P2O, O2O")))
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.as_str().to_string()
    }
}

/// Everything one experiment needs. Stored as TOML: top-level keys plus
/// one section per stage (`dataset`, `extractor`, `protect`, `attacker`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub master_seed: u64,
    /// Run directory. Not part of the config hash.
    pub out_dir: PathBuf,
    pub protectors: Vec<Protector>,
    pub settings: Vec<Setting>,
    pub ad_mode: AdMode,
    pub dataset: DatasetConfig,
    pub extractor: ExtractorTrainConfig,
    /// Shared by every iterative protector. `noise_seed` and `mask_seed`
    /// act as salts for the per-image seeds.
    pub protect: ProtectConfig,
    pub attacker: RecoveryTrainConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            master_seed: 7,
            out_dir: PathBuf::from("runs/default"),
            protectors: vec![
                Protector::PixelFade,
                Protector::GaussianBlur { radius: 3 },
                Protector::Mosaic { block: 4 },
            ],
            settings: Setting::ALL.to_vec(),
            ad_mode: AdMode::PerImage,
            dataset: DatasetConfig::default(),
            extractor: ExtractorTrainConfig::default(),
            protect: ProtectConfig::default(),
            attacker: RecoveryTrainConfig::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.protect.validate()?;
        self.extractor.optimizer.validate()?;
        self.attacker.optimizer.validate()?;
        if self.protectors.is_empty() {
            return Err(Error::Config("plan lists no protectors".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::Config("plan lists no evaluation settings".into()));
        }
        let mut names: Vec<String> = self.protectors.iter().map(Protector::dir_name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("protector {} is listed twice", w[0])));
        }
        if self.attacker.epochs == 0 || self.attacker.batch_size == 0 {
            return Err(Error::Config("attacker epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let plan: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// SHA-256 of the canonical JSON form (sorted keys), `out_dir` excluded.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn stage_seed(&self, labels: &[&str]) -> u64 {
        derive_seed(self.master_seed, labels)
    }
}

/// Command-line overrides of plan fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanOverrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub iters: Option<usize>,
    pub masks: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl PlanOverrides {
    /// Flag name and the plan field it sets, as a dotted path into the
    /// serialised plan.
    pub const FIELDS: [(&'static str, &'static str); 7] = [
        ("out", "out_dir"),
        ("seed", "master_seed"),
        ("epsilon", "protect.epsilon"),
        ("iters", "protect.T"),
        ("masks", "protect.I"),
        ("alpha", "protect.alpha"),
        ("beta", "protect.beta"),
    ];

    pub fn apply(&self, plan: &mut ExperimentPlan) -> Result<()> {
        if let Some(v) = &self.out {
            plan.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            plan.master_seed = v;
        }
        if let Some(v) = self.epsilon {
            plan.protect.epsilon = v;
        }
        if let Some(v) = self.iters {
            plan.protect.t = v;
        }
        if let Some(v) = self.masks {
            plan.protect.i = v;
        }
        if let Some(v) = self.alpha {
            plan.protect.alpha = v;
        }
        if let Some(v) = self.beta {
            plan.protect.beta = v;
        }
        plan.validate()
    }
}
