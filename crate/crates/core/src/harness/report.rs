use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::plan::Setting;
use crate::error::{Error, Result};
use crate::protect::Protector;

/// PSNR can be infinite; JSON has no infinity, so it is written as the
/// string `"inf"`.
mod maybe_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Mean quality of the attacker's reconstructions against the originals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    #[serde(with = "maybe_inf")]
    pub psnr: f64,
    pub ssim: f64,
    /// Mean L1 training loss of the last epoch.
    pub train_l1: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCell {
    pub protector: Protector,
    pub setting: Setting,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
}

/// Per-protector distribution and constraint statistics of the protected
/// gallery.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosCell {
    /// Anderson–Darling statistic over the scored gallery subset.
    pub ad: f64,
    pub n_images: usize,
    /// Mean feature loss over the whole protected gallery.
    pub mean_final_loss: f64,
    pub constraint_met_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// AD of the unprotected images of the scored subset.
    pub original_ad: f64,
    /// The attacker trained on unprotected pairs.
    pub attack_ceiling: AttackMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectorRow {
    pub protector: Protector,
    pub recovered: AttackMetrics,
    pub chaos: ChaosCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Provenance(Provenance),
    Retrieval(RetrievalCell),
    Protector(ProtectorRow),
}

/// The final results table: one retrieval row per (protector, setting) and
/// one attack/chaos row per protector.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub retrieval: Vec<RetrievalCell>,
    pub protectors: Vec<ProtectorRow>,
}

impl EvalReport {
    pub fn row_count(&self) -> usize {
        self.retrieval.len() + self.protectors.len()
    }

    pub fn cell(&self, protector: Protector, setting: Setting) -> Option<&RetrievalCell> {
        self.retrieval
            .iter()
            .find(|c| c.protector == protector && c.setting == setting)
    }

    pub fn protector_row(&self, protector: Protector) -> Option<&ProtectorRow> {
        self.protectors.iter().find(|r| r.protector == protector)
    }

    /// A provenance line followed by one line per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Record::Provenance(self.provenance.clone()))?;
        out.push('\n');
        for c in &self.retrieval {
            out += &serde_json::to_string(&Record::Retrieval(*c))?;
            out.push('\n');
        }
        for r in &self.protectors {
            out += &serde_json::to_string(&Record::Protector(r.clone()))?;
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut provenance = None;
        let (mut retrieval, mut protectors) = (Vec::new(), Vec::new());
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                Record::Provenance(p) => {
                    if provenance.replace(p).is_some() {
                        return Err(Error::Format {
                            kind: "report",
                            detail: "more than one provenance record".into(),
                        });
                    }
                }
                Record::Retrieval(c) => retrieval.push(c),
                Record::Protector(r) => protectors.push(r),
            }
        }
        let provenance = provenance.ok_or_else(|| Error::Format {
            kind: "report",
            detail: "no provenance record".into(),
        })?;
        Ok(Self {
            provenance,
            retrieval,
            protectors,
        })
    }

    pub fn to_table(&self) -> String {
        let p = &self.provenance;
        let mut t = String::new();
        let _ = writeln!(t, "config {}  master_seed {}", p.config_hash, p.master_seed);
        let seeds: Vec<String> = p.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(t, "seeds {}", seeds.join(" "));
        let _ = writeln!(
            t,
            "original AD {:.3}  attack ceiling PSNR {:.2} SSIM {:.4}",
            p.original_ad, p.attack_ceiling.psnr, p.attack_ceiling.ssim
        );
        let width = self
            .protectors
            .iter()
            .map(|r| r.protector.to_string().len())
            .chain(self.retrieval.iter().map(|c| c.protector.to_string().len()))
            .max()
            .unwrap_or(9)
            .max(9);
        let _ = writeln!(t);
        let _ = writeln!(t, "{:<width$}  setting   rank1     mAP    mINP", "protector");
        for c in &self.retrieval {
            let _ = writeln!(
                t,
                "{:<width$}  {:<7} {:>7.4} {:>7.4} {:>7.4}",
                c.protector.to_string(),
                c.setting.as_str(),
                c.rank1,
                c.map,
                c.minp
            );
        }
        let _ = writeln!(t);
        let _ = writeln!(
            t,
            "{:<width$}  rec_PSNR  rec_SSIM        AD  mean_L_f   met",
            "protector"
        );
        for r in &self.protectors {
            let _ = writeln!(
                t,
                "{:<width$}  {:>8.2}  {:>8.4}  {:>8.3}  {:>8.4}  {:>4.2}",
                r.protector.to_string(),
                r.recovered.psnr,
                r.recovered.ssim,
                r.chaos.ad,
                r.chaos.mean_final_loss,
                r.chaos.constraint_met_fraction
            );
        }
        t
    }
}
