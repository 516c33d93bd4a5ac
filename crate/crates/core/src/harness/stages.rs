use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::{ExperimentPlan, Setting};
use super::report::{AttackMetrics, ChaosCell, EvalReport, ProtectorRow, Provenance, RetrievalCell};
use crate::error::{Error, Result};
use crate::metrics::{cmc_rank_k, image_set_ad, m_inp, mean_ap, psnr, ssim, RankedRetrieval};
use crate::nets::{train_extractor, train_recovery, FeatureExtractor, LabeledImage, TrainingLog};
use crate::protect::{write_trace_jsonl, ProtectConfig, Protector};
use crate::synth::{
    gen_dataset_with, image_rel_path, read_dataset, read_image, write_dataset, write_image, DatasetSplits, Split,
    ViewRender,
};
use crate::tensor::Tensor;

/// Name used for the attacker trained on unprotected images.
pub const NO_PROTECTION: &str = "none";
/// Name used for the unprotected images in chaos scoring.
pub const ORIGINAL: &str = "original";

/// Fixed paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn extractor(&self) -> PathBuf {
        self.root.join("models/extractor.fadekit")
    }

    pub fn extractor_log(&self) -> PathBuf {
        self.root.join("models/extractor_log.jsonl")
    }

    pub fn protected_image(&self, protector: &str, split: Split, v: &ViewRender) -> PathBuf {
        self.root
            .join("protected")
            .join(protector)
            .join(image_rel_path(split, v.identity_id, v.view))
    }

    pub fn trace(&self, protector: &str, split: Split, v: &ViewRender) -> PathBuf {
        self.root
            .join("traces")
            .join(protector)
            .join(image_rel_path(split, v.identity_id, v.view))
            .with_extension("jsonl")
    }

    /// One line per protected image with its final loss.
    pub fn protect_summary(&self, protector: &str) -> PathBuf {
        self.root.join("traces").join(protector).join("summary.jsonl")
    }

    pub fn attack_dir(&self, protector: &str) -> PathBuf {
        self.root.join("attack").join(protector)
    }

    pub fn attack_metrics(&self, protector: &str) -> PathBuf {
        self.attack_dir(protector).join("metrics.json")
    }

    pub fn retrieval_cell(&self, protector: &str, setting: Setting) -> PathBuf {
        self.root
            .join("reports/cells")
            .join(format!("retrieval_{protector}_{setting}.json"))
    }

    pub fn chaos_cell(&self, protector: &str) -> PathBuf {
        self.root.join("reports/cells").join(format!("chaos_{protector}.json"))
    }

    pub fn report_jsonl(&self) -> PathBuf {
        self.root.join("reports/report.jsonl")
    }

    pub fn report_table(&self) -> PathBuf {
        self.root.join("reports/report.txt")
    }
}

/// Outcome of protecting one image, as stored in the summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub split: Split,
    pub identity: usize,
    pub view: usize,
    pub final_loss: f64,
    pub constraint_met_at_end: bool,
    pub coverage: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: what.into(),
        })
    }
}

fn images(views: &[ViewRender]) -> Vec<Tensor> {
    views.iter().map(|v| v.image.clone()).collect()
}

fn labels(views: &[ViewRender]) -> Vec<usize> {
    views.iter().map(|v| v.identity_id).collect()
}

/// Index of the first other-identity image after `idx`, cycling.
fn other_identity_index(views: &[ViewRender], idx: usize) -> Option<usize> {
    let id = views[idx].identity_id;
    (1..views.len())
        .map(|k| (idx + k) % views.len())
        .find(|&j| views[j].identity_id != id)
}

/// The gallery subset scored for chaos: the first gallery view of every
/// identity.
pub fn chaos_subset(gallery: &[ViewRender]) -> Vec<usize> {
    let mut first: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, v) in gallery.iter().enumerate() {
        let e = first.entry(v.identity_id).or_insert((v.view, i));
        if v.view < e.0 {
            *e = (v.view, i);
        }
    }
    first.values().map(|&(_, i)| i).collect()
}

/// Runs the stages of one experiment plan inside its run directory.
pub struct Pipeline {
    plan: ExperimentPlan,
    layout: RunLayout,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// `workers == 0` uses one worker per available core.
    pub fn new(plan: ExperimentPlan, workers: usize) -> Result<Self> {
        plan.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        let layout = RunLayout::new(plan.out_dir.clone());
        Ok(Self { plan, layout, pool })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    fn data_seed(&self) -> u64 {
        self.plan.stage_seed(&["gen_data"])
    }

    fn extractor_seed(&self) -> u64 {
        self.plan.stage_seed(&["train_extractor"])
    }

    fn attack_seed(&self, name: &str) -> u64 {
        self.plan.stage_seed(&["attack", name])
    }

    /// Per-image protection settings. Seeds depend on the image, not on
    /// the protector, so every method sees the same noise and masks.
    pub fn image_config(&self, split: Split, v: &ViewRender) -> ProtectConfig {
        let rel = image_rel_path(split, v.identity_id, v.view);
        let noise_salt = self.plan.protect.noise_seed.to_string();
        let mask_salt = self.plan.protect.mask_seed.to_string();
        ProtectConfig {
            noise_seed: self.plan.stage_seed(&["protect", &rel, "noise", &noise_salt]),
            mask_seed: self.plan.stage_seed(&["protect", &rel, "mask", &mask_salt]),
            ..self.plan.protect.clone()
        }
    }

    pub fn gen_data(&self) -> Result<()> {
        let data = gen_dataset_with(&self.plan.dataset, self.data_seed())?;
        let dir = self.layout.data();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let n = write_dataset(&dir, &data)?.len();
        info!("gen-data: wrote {n} images to {}", dir.display());
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetSplits> {
        read_dataset(&self.layout.data())
    }

    pub fn train_extractor(&self) -> Result<TrainingLog> {
        let data = self.dataset()?;
        let labelled = |views: &[ViewRender]| -> Vec<LabeledImage> {
            views
                .iter()
                .map(|v| LabeledImage {
                    image: v.image.clone(),
                    label: v.identity_id,
                })
                .collect()
        };
        // Query views of trained identities are unseen renders; with disjoint
        // training they belong to unseen classes and cannot be scored.
        let holdout = if data.disjoint_train {
            Vec::new()
        } else {
            labelled(&data.query)
        };
        let (model, log) = train_extractor(
            &labelled(&data.train),
            &holdout,
            &self.plan.extractor,
            self.extractor_seed(),
        )?;
        let path = self.layout.extractor();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(&path)?;
        log.write_jsonl(&self.layout.extractor_log())?;
        info!(
            "train-extractor: final loss {:.4}, held-out accuracy {:?}",
            log.final_loss().unwrap_or(f64::NAN),
            log.holdout_accuracy
        );
        Ok(log)
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        let path = self.layout.extractor();
        require(&path, "trained extractor weights (run train-extractor first)")?;
        FeatureExtractor::load(&path)
    }

    /// Protects every split with every protector in the plan.
    pub fn protect(&self) -> Result<()> {
        let data = self.dataset()?;
        let model = self.extractor()?;
        for &p in &self.plan.protectors {
            self.protect_with(p, &data, &model)?;
        }
        Ok(())
    }

    pub fn protect_with(
        &self,
        protector: Protector,
        data: &DatasetSplits,
        model: &FeatureExtractor,
    ) -> Result<Vec<ImageSummary>> {
        let name = protector.dir_name();
        let mut summaries = Vec::new();
        for split in Split::ALL {
            let views = data.split(split);
            let out: Vec<ImageSummary> = self.pool.install(|| {
                (0..views.len())
                    .into_par_iter()
                    .map(|i| {
                        let v = &views[i];
                        let other = if protector.needs_other_identity() {
                            other_identity_index(views, i).map(|j| &views[j].image)
                        } else {
                            None
                        };
                        let r = protector.apply(&v.image, model, &self.image_config(split, v), other)?;
                        write_image(&self.layout.protected_image(&name, split, v), &r.protected)?;
                        write_trace_jsonl(&self.layout.trace(&name, split, v), &r.trace)?;
                        Ok(ImageSummary {
                            split,
                            identity: v.identity_id,
                            view: v.view,
                            final_loss: r.final_loss,
                            constraint_met_at_end: r.constraint_met_at_end,
                            coverage: r.coverage,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            summaries.extend(out);
        }
        let mut text = String::new();
        for s in &summaries {
            text += &serde_json::to_string(s)?;
            text.push('\n');
        }
        let path = self.layout.protect_summary(&name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let gallery: Vec<&ImageSummary> = summaries.iter().filter(|s| s.split == Split::Gallery).collect();
        info!(
            "protect {name}: gallery mean loss {:.4}, constraint met {}/{}",
            gallery.iter().map(|s| s.final_loss).sum::<f64>() / gallery.len().max(1) as f64,
            gallery.iter().filter(|s| s.constraint_met_at_end).count(),
            gallery.len()
        );
        Ok(summaries)
    }

    pub fn read_summary(&self, protector: Protector) -> Result<Vec<ImageSummary>> {
        let path = self.layout.protect_summary(&protector.dir_name());
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact {
                    path,
                    what: format!("protection summary for {protector} (run protect first)"),
                })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Loads the protected version of every image of a split, in split order.
    pub fn protected_split(&self, protector: Protector, data: &DatasetSplits, split: Split) -> Result<Vec<Tensor>> {
        let name = protector.dir_name();
        data.split(split)
            .iter()
            .map(|v| {
                let path = self.layout.protected_image(&name, split, v);
                require(&path, &format!("protected {} image for {protector}", split.as_str()))?;
                read_image(&path)
            })
            .collect()
    }

    /// Trains one attacker per protector, plus the unprotected ceiling.
    pub fn attack(&self) -> Result<()> {
        let data = self.dataset()?;
        self.attack_with(None, &data)?;
        for &p in &self.plan.protectors {
            self.attack_with(Some(p), &data)?;
        }
        Ok(())
    }

    /// Trains the recovery network on protected/original train pairs and
    /// scores its reconstructions of the protected query and gallery.
    pub fn attack_with(&self, protector: Option<Protector>, data: &DatasetSplits) -> Result<AttackMetrics> {
        let name = protector.map_or(NO_PROTECTION.to_string(), |p| p.dir_name());
        let load = |split: Split| -> Result<Vec<Tensor>> {
            match protector {
                Some(p) => self.protected_split(p, data, split),
                None => Ok(images(data.split(split))),
            }
        };
        let pairs: Vec<(Tensor, Tensor)> = load(Split::Train)?.into_iter().zip(images(&data.train)).collect();
        let (net, log) = train_recovery(&pairs, &self.plan.attacker, self.attack_seed(&name))?;
        let mut protected = load(Split::Query)?;
        protected.extend(load(Split::Gallery)?);
        let mut originals = images(&data.query);
        originals.extend(images(&data.gallery));
        let recovered: Vec<Tensor> = self
            .pool
            .install(|| {
                protected
                    .par_chunks(16)
                    .map(|c| net.recover_many(c))
                    .collect::<Result<Vec<_>>>()
            })?
            .into_iter()
            .flatten()
            .collect();
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for (r, o) in recovered.iter().zip(&originals) {
            psnr_sum += psnr(o, r)?;
            ssim_sum += ssim(o, r)?;
        }
        let n = originals.len() as f64;
        let metrics = AttackMetrics {
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            train_l1: log.final_loss().unwrap_or(f64::NAN),
            n_train: pairs.len(),
            n_eval: originals.len(),
        };
        let dir = self.layout.attack_dir(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log.write_jsonl(&dir.join("train_log.jsonl"))?;
        write_json(&self.layout.attack_metrics(&name), &metrics)?;
        info!(
            "attack {name}: recovered PSNR {:.2} SSIM {:.4}",
            metrics.psnr, metrics.ssim
        );
        Ok(metrics)
    }

    fn embed_all(&self, model: &FeatureExtractor, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let chunks = self.pool.install(|| {
            images
                .par_chunks(32)
                .map(|c| model.embed_many(c))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Retrieval metrics for every protector under `settings`, plus the
    /// chaos score of every protected gallery.
    pub fn eval(&self, settings: &[Setting]) -> Result<Vec<RetrievalCell>> {
        let data = self.dataset()?;
        let model = self.extractor()?;
        let (ql, gl) = (labels(&data.query), labels(&data.gallery));
        let orig_q = self.embed_all(&model, &images(&data.query))?;
        let orig_g = self.embed_all(&model, &images(&data.gallery))?;
        let subset = chaos_subset(&data.gallery);
        let original_subset: Vec<Tensor> = subset.iter().map(|&i| data.gallery[i].image.clone()).collect();
        write_json(
            &self.layout.chaos_cell(ORIGINAL),
            &ChaosCell {
                ad: image_set_ad(&original_subset, self.plan.ad_mode)?,
                n_images: subset.len(),
                mean_final_loss: 0.0,
                constraint_met_fraction: 1.0,
            },
        )?;

        let mut cells = Vec::new();
        for &p in &self.plan.protectors {
            let pq_img = self.protected_split(p, &data, Split::Query)?;
            let pg_img = self.protected_split(p, &data, Split::Gallery)?;
            let pq = self.embed_all(&model, &pq_img)?;
            let pg = self.embed_all(&model, &pg_img)?;
            for &s in settings {
                let q = if s.protected_query() { &pq } else { &orig_q };
                let g = if s.protected_gallery() { &pg } else { &orig_g };
                let r = RankedRetrieval::from_embeddings(q, &ql, g, &gl)?;
                let cell = RetrievalCell {
                    protector: p,
                    setting: s,
                    rank1: cmc_rank_k(&r, 1)?,
                    map: mean_ap(&r)?,
                    minp: m_inp(&r)?,
                };
                write_json(&self.layout.retrieval_cell(&p.dir_name(), s), &cell)?;
                info!(
                    "eval {p} {s}: rank-1 {:.4} mAP {:.4} mINP {:.4}",
                    cell.rank1, cell.map, cell.minp
                );
                cells.push(cell);
            }
            let summary = self.read_summary(p)?;
            let gallery: Vec<&ImageSummary> = summary.iter().filter(|s| s.split == Split::Gallery).collect();
            let scored: Vec<Tensor> = subset.iter().map(|&i| pg_img[i].clone()).collect();
            write_json(
                &self.layout.chaos_cell(&p.dir_name()),
                &ChaosCell {
                    ad: image_set_ad(&scored, self.plan.ad_mode)?,
                    n_images: scored.len(),
                    mean_final_loss: gallery.iter().map(|s| s.final_loss).sum::<f64>() / gallery.len().max(1) as f64,
                    constraint_met_fraction: gallery.iter().filter(|s| s.constraint_met_at_end).count() as f64
                        / gallery.len().max(1) as f64,
                },
            )?;
        }
        Ok(cells)
    }

    /// Assembles the report from the stored cells; every protector needs
    /// every plan setting, an attack result and a chaos score.
    pub fn report(&self) -> Result<EvalReport> {
        let mut missing = Vec::new();
        let mut get = |path: PathBuf, label: String| -> Option<Vec<u8>> {
            match fs::read(&path) {
                Ok(b) => Some(b),
                Err(_) => {
                    missing.push(label);
                    None
                }
            }
        };
        let ceiling = get(
            self.layout.attack_metrics(NO_PROTECTION),
            format!("attack {NO_PROTECTION}"),
        );
        let original = get(self.layout.chaos_cell(ORIGINAL), format!("chaos {ORIGINAL}"));
        let mut raw_cells = Vec::new();
        let mut raw_rows = Vec::new();
        for &p in &self.plan.protectors {
            let name = p.dir_name();
            for &s in &self.plan.settings {
                raw_cells.push(get(self.layout.retrieval_cell(&name, s), format!("retrieval {p} {s}")));
            }
            raw_rows.push((
                p,
                get(self.layout.attack_metrics(&name), format!("attack {p}")),
                get(self.layout.chaos_cell(&name), format!("chaos {p}")),
            ));
        }
        if !missing.is_empty() {
            return Err(Error::MissingCells(missing));
        }
        let parse =
            |b: Option<Vec<u8>>| -> Result<serde_json::Value> { Ok(serde_json::from_slice(&b.unwrap_or_default())?) };
        let ceiling: AttackMetrics = serde_json::from_value(parse(ceiling)?)?;
        let original: ChaosCell = serde_json::from_value(parse(original)?)?;
        let retrieval = raw_cells
            .into_iter()
            .map(|b| Ok(serde_json::from_value(parse(b)?)?))
            .collect::<Result<Vec<RetrievalCell>>>()?;
        let protectors = raw_rows
            .into_iter()
            .map(|(p, a, c)| {
                Ok(ProtectorRow {
                    protector: p,
                    recovered: serde_json::from_value(parse(a)?)?,
                    chaos: serde_json::from_value(parse(c)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut seeds = BTreeMap::new();
        seeds.insert("gen_data".to_string(), self.data_seed());
        seeds.insert("train_extractor".to_string(), self.extractor_seed());
        seeds.insert(format!("attack:{NO_PROTECTION}"), self.attack_seed(NO_PROTECTION));
        for p in &self.plan.protectors {
            seeds.insert(format!("attack:{}", p.dir_name()), self.attack_seed(&p.dir_name()));
        }
        seeds.insert("protect.noise_salt".to_string(), self.plan.protect.noise_seed);
        seeds.insert("protect.mask_salt".to_string(), self.plan.protect.mask_seed);
        let report = EvalReport {
            provenance: Provenance {
                config_hash: self.plan.config_hash()?,
                master_seed: self.plan.master_seed,
                seeds,
                original_ad: original.ad,
                attack_ceiling: ceiling,
            },
            retrieval,
            protectors,
        };
        let jsonl = self.layout.report_jsonl();
        if let Some(dir) = jsonl.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&jsonl, report.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))?;
        let table = self.layout.report_table();
        fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
        Ok(report)
    }

    /// Every stage in order, with the resolved plan saved as `plan.toml`.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.save_plan()?;
        self.gen_data()?;
        self.train_extractor()?;
        self.protect()?;
        self.attack()?;
        self.eval(&self.plan.settings)?;
        self.report()
    }

    pub fn save_plan(&self) -> Result<()> {
        let root = self.layout.root();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("plan.toml");
        fs::write(&path, self.plan.to_toml_string()?).map_err(|e| Error::io(&path, e))
    }
}
