#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use fadekit::harness::{ExperimentPlan, Setting};
use fadekit::nets::{ExtractorTrainConfig, OptimizerConfig, RecoveryTrainConfig};
use fadekit::protect::{ProtectConfig, Protector};
use fadekit::synth::DatasetConfig;

/// A plan small enough to run every stage in a few seconds. Numbers from it
/// say nothing about quality; it exercises plumbing only.
pub fn small_plan(out: &Path) -> ExperimentPlan {
    ExperimentPlan {
        master_seed: 3,
        out_dir: out.to_path_buf(),
        protectors: vec![
            Protector::PixelFade,
            Protector::GaussianBlur { radius: 3 },
            Protector::Mosaic { block: 4 },
        ],
        settings: Setting::ALL.to_vec(),
        dataset: DatasetConfig::new(4, 6, (32, 16)),
        extractor: ExtractorTrainConfig {
            epochs: 2,
            ..ExtractorTrainConfig::default()
        },
        protect: ProtectConfig {
            t: 24,
            ..ProtectConfig::default()
        },
        attacker: RecoveryTrainConfig {
            epochs: 2,
            optimizer: OptimizerConfig::adam(1e-3),
            ..RecoveryTrainConfig::default()
        },
        ..ExperimentPlan::default()
    }
}

/// Every regular file under `root` with its contents, keyed by relative path.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    walk(root, root, &mut out);
    out
}
