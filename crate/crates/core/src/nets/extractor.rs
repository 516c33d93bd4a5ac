//! The authorized embedding model: three conv/relu/avg-pool blocks, global
//! average pooling and a linear head whose rectified output is
//! L2-normalised into the embedding.
//! A cosine classifier head is used only while training.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{TrainingLog, TrainingRecord};
use super::optim::{Optimizer, OptimizerConfig};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Conv2dSpec, Graph, Tensor, Var};

const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// `(channels, height, width)`; height and width must be multiples of 8.
    pub input_shape: [usize; 3],
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub n_classes: usize,
    pub logit_scale: f64,
}

impl ExtractorConfig {
    pub fn new(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            input_shape,
            channels: [8, 16, 32],
            embed_dim: 64,
            n_classes,
            logit_scale: 16.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "extractor input {:?} must have height and width divisible by 8",
                self.input_shape
            )));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.n_classes < 2 {
            return Err(Error::Config(
                "extractor needs positive widths and at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen or trainable feature extractor `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    params: ParamSet,
}

/// Parameter handles of an extractor placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundExtractor {
    vars: Vec<Var>,
}

/// `[b, c, h, w] → [b, c]` spatial mean.
fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let rows = g.reshape(x, vec![b * c, n])?;
    let avg = g.constant(Tensor::new(vec![n, 1], vec![1.0 / n as f64; n])?);
    let m = g.matmul(rows, avg)?;
    g.reshape(m, vec![b, c])
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, _, _] = config.input_shape;
        let [c1, c2, c3] = config.channels;
        let d = config.embed_dim;
        let mut entries = Vec::new();
        for (i, (cin, cout)) in [(c0, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            entries.push((
                format!("conv{}.weight", i + 1),
                he_normal(vec![cout, cin, 3, 3], cin * 9, &mut rng),
            ));
            entries.push((format!("conv{}.bias", i + 1), Tensor::zeros(vec![cout])));
        }
        let flat = c3;
        entries.push((
            "fc.weight".into(),
            Tensor::randn(vec![flat, d], (1.0 / flat as f64).sqrt(), &mut rng),
        ));
        entries.push(("fc.bias".into(), Tensor::zeros(vec![d])));
        entries.push((
            "cls.weight".into(),
            Tensor::randn(vec![d, config.n_classes], (1.0 / d as f64).sqrt(), &mut rng),
        ));
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundExtractor {
        BoundExtractor {
            vars: self.params.bind(g, trainable),
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.input_shape {
            return Err(Error::shape(
                "embed",
                format!("model expects {:?}, image is {shape:?}", self.config.input_shape),
            ));
        }
        Ok(())
    }

    /// Raw (unnormalised, non-negative) features `[b, d]` for a batch `[b, c, h, w]`.
    pub fn features_var(&self, g: &mut Graph, bound: &BoundExtractor, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "embed",
                format!("expected a [b, c, h, w] batch, got {s:?}"),
            ));
        }
        self.check_image(&s[1..])?;
        let w = &bound.vars;
        let mut h = x;
        for block in 0..3 {
            h = g.conv2d(h, w[2 * block], Some(w[2 * block + 1]), SAME3)?;
            h = g.relu(h)?;
            h = g.avg_pool2d(h, 2)?;
        }
        let flat = global_avg_pool(g, h)?;
        let fc = g.matmul(flat, w[6])?;
        let fc = g.add_bias(fc, w[7])?;
        g.relu(fc)
    }

    /// Embedding of a single `(c, h, w)` image variable as a `[1, d]` row,
    /// unit-norm when `normalized`.
    pub fn embed_var(&self, g: &mut Graph, bound: &BoundExtractor, image: Var, normalized: bool) -> Result<Var> {
        let s = g.shape(image).to_vec();
        self.check_image(&s)?;
        let mut batched = s.clone();
        batched.insert(0, 1);
        let x = g.reshape(image, batched)?;
        let f = self.features_var(g, bound, x)?;
        if normalized {
            g.normalize_rows(f)
        } else {
            Ok(f)
        }
    }

    fn logits_var(&self, g: &mut Graph, bound: &BoundExtractor, x: Var) -> Result<Var> {
        let f = self.features_var(g, bound, x)?;
        let e = g.normalize_rows(f)?;
        let l = g.matmul(e, bound.vars[8])?;
        g.scale(l, self.config.logit_scale)
    }

    /// Unit-norm embedding of one `(c, h, w)` image.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.embed_with(image, true)
    }

    /// Embedding before normalisation.
    pub fn raw_features(&self, image: &Tensor) -> Result<Tensor> {
        self.embed_with(image, false)
    }

    fn embed_with(&self, image: &Tensor, normalized: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let e = self.embed_var(&mut g, &bound, x, normalized)?;
        g.value(e).clone().reshape(vec![self.config.embed_dim])
    }

    /// Unit-norm embeddings for many images, evaluated in batches.
    pub fn embed_many(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let x = g.constant(Tensor::stack(&refs)?);
            let f = self.features_var(&mut g, &bound, x)?;
            let e = g.normalize_rows(f)?;
            out.extend(g.value(e).unstack()?);
        }
        Ok(out)
    }

    /// Predicted class of each image.
    pub fn classify(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let x = g.constant(Tensor::stack(&refs)?);
            let l = self.logits_var(&mut g, &bound, x)?;
            out.extend(g.value(l).data().chunks(self.config.n_classes).map(argmax));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        let [c1, c2, c3] = self.config.channels;
        let meta = vec![
            (
                "meta.input_shape".to_string(),
                Tensor::new(vec![3], vec![c as f64, h as f64, w as f64])?,
            ),
            (
                "meta.channels".to_string(),
                Tensor::new(vec![3], vec![c1 as f64, c2 as f64, c3 as f64])?,
            ),
            ("meta.logit_scale".to_string(), Tensor::scalar(self.config.logit_scale)),
        ];
        let mut all = meta;
        all.extend(self.params.entries().iter().cloned());
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(BufWriter::new(f), &all).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "extractor weights (run train-extractor first)".into(),
            },
            _ => Error::io(path, e),
        })?;
        let mut entries = read_tensors(BufReader::new(f))?;
        let bad = |d: &str| Error::Format {
            kind: "extractor weights",
            detail: d.to_string(),
        };
        if entries.len() < 3 {
            return Err(bad("missing metadata"));
        }
        let rest = entries.split_off(3);
        let dims = |t: &Tensor| -> [usize; 3] { [t.data()[0] as usize, t.data()[1] as usize, t.data()[2] as usize] };
        let (input_shape, channels, scale) = match entries.as_slice() {
            [(a, s), (b, ch), (c, ls)]
                if a == "meta.input_shape"
                    && b == "meta.channels"
                    && c == "meta.logit_scale"
                    && s.len() == 3
                    && ch.len() == 3 =>
            {
                (dims(s), dims(ch), ls.item()?)
            }
            _ => return Err(bad("unexpected metadata records")),
        };
        let params = ParamSet::new(rest);
        let fc = params.get("fc.weight").ok_or_else(|| bad("no fc.weight"))?;
        let cls = params.get("cls.weight").ok_or_else(|| bad("no cls.weight"))?;
        let config = ExtractorConfig {
            input_shape,
            channels,
            embed_dim: fc.shape().get(1).copied().unwrap_or(0),
            n_classes: cls.shape().get(1).copied().unwrap_or(0),
            logit_scale: scale,
        };
        let template = FeatureExtractor::new(config.clone(), 0)?;
        template.params.expect_layout(&params)?;
        Ok(Self { config, params })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// One training image with its identity label.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub channels: [usize; 3],
    pub embed_dim: usize,
    pub logit_scale: f64,
    /// Random horizontal flips during training.
    pub flip_augment: bool,
    /// Maximum random translation in pixels (edge-replicated).
    pub shift_augment: usize,
    /// Maximum random additive brightness change.
    pub brightness_augment: f64,
    /// Probability of random erasing: one rectangle covering 2%–40% of the
    /// image is filled with uniform random values.
    pub erase_prob: f64,
    /// Anneal the learning rate per epoch along a half cosine towards zero.
    pub cosine_decay: bool,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(2e-3),
            channels: [8, 16, 32],
            embed_dim: 64,
            logit_scale: 16.0,
            flip_augment: true,
            shift_augment: 2,
            brightness_augment: 0.1,
            erase_prob: 0.5,
            cosine_decay: true,
        }
    }
}

pub(crate) fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let w = s[s.len() - 1];
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(img.data().chunks(w)) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = src[w - 1 - i];
        }
    }
    out
}

fn shift(img: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = img.clone();
    let src = img.data();
    for (plane_out, plane_in) in out.data_mut().chunks_mut(h * w).zip(src.chunks(h * w)) {
        for r in 0..h {
            let sr = (r as isize - dy).clamp(0, h as isize - 1) as usize;
            for c in 0..w {
                let sc = (c as isize - dx).clamp(0, w as isize - 1) as usize;
                plane_out[r * w + c] = plane_in[sr * w + sc];
            }
        }
    }
    out
}

fn augment(img: &Tensor, cfg: &ExtractorTrainConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = if cfg.flip_augment && rng.gen_bool(0.5) {
        hflip(img)
    } else {
        img.clone()
    };
    if cfg.shift_augment > 0 {
        let m = cfg.shift_augment as isize;
        x = shift(&x, rng.gen_range(-m..=m), rng.gen_range(-m..=m));
    }
    if cfg.brightness_augment > 0.0 {
        let b = rng.gen_range(-cfg.brightness_augment..=cfg.brightness_augment);
        x.data_mut().iter_mut().for_each(|v| *v = (*v + b).clamp(0.0, 1.0));
    }
    if cfg.erase_prob > 0.0 && rng.gen_bool(cfg.erase_prob.min(1.0)) {
        random_erase(&mut x, rng);
    }
    x
}

fn random_erase(x: &mut Tensor, rng: &mut ChaCha8Rng) {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let area = (h * w) as f64 * rng.gen_range(0.02..0.4);
    let aspect: f64 = rng.gen_range(0.3f64.ln()..3.3f64.ln()).exp();
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let r0 = rng.gen_range(0..=h - eh);
    let c0 = rng.gen_range(0..=w - ew);
    let d = x.data_mut();
    for ch in 0..c {
        for r in r0..r0 + eh {
            for col in c0..c0 + ew {
                d[ch * h * w + r * w + col] = rng.gen();
            }
        }
    }
}

/// Cross-entropy and accuracy over the unaugmented training set.
fn clean_objective(model: &FeatureExtractor, train: &[LabeledImage], n_classes: usize) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in train.chunks(32) {
        let refs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.constant(Tensor::stack(&refs)?);
        let logits = model.logits_var(&mut g, &bound, x)?;
        let loss = g.cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).item()? * chunk.len() as f64;
        correct += g
            .value(logits)
            .data()
            .chunks(n_classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
}

/// Trains the extractor with cross-entropy over identity labels.
///
/// `holdout` (e.g. unseen views of the training identities) is scored once
/// after the last epoch.
pub fn train_extractor(
    train: &[LabeledImage],
    holdout: &[LabeledImage],
    cfg: &ExtractorTrainConfig,
    seed: u64,
) -> Result<(FeatureExtractor, TrainingLog)> {
    let first = train.first().ok_or_else(|| Error::invalid("training set is empty"))?;
    let n_classes = train.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut distinct: Vec<usize> = train.iter().map(|s| s.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("extractor training needs at least 2 identities"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let shape: [usize; 3] = first.image.shape().try_into().map_err(|_| {
        Error::shape(
            "train_extractor",
            format!("images must be (c, h, w), got {:?}", first.image.shape()),
        )
    })?;
    let config = ExtractorConfig {
        input_shape: shape,
        channels: cfg.channels,
        embed_dim: cfg.embed_dim,
        n_classes,
        logit_scale: cfg.logit_scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FeatureExtractor::new(config, rng.gen())?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params.tensors())?;
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.cosine_decay {
            let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
            opt.set_learning_rate(cfg.optimizer.learning_rate * 0.5 * (1.0 + phase.cos()))?;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor> = batch.iter().map(|&i| augment(&train[i].image, cfg, &mut rng)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&refs)?);
            let logits = model.logits_var(&mut g, &bound, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).item()? * batch.len() as f64;
            let grads = model.params.grads(&g, &bound.vars)?;
            opt.step(model.params.tensors_mut(), &grads)?;
        }
        let (loss, accuracy) = clean_objective(&model, train, n_classes)?;
        log.records.push(TrainingRecord {
            step: epoch,
            loss,
            accuracy: Some(accuracy),
            batch_loss: Some(loss_sum / train.len() as f64),
        });
    }

    if !holdout.is_empty() {
        let imgs: Vec<Tensor> = holdout.iter().map(|s| s.image.clone()).collect();
        let pred = model.classify(&imgs)?;
        let hits = pred.iter().zip(holdout).filter(|(p, s)| **p == s.label).count();
        log.holdout_accuracy = Some(hits as f64 / holdout.len() as f64);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::rand_uniform(vec![3, 16, 8], 0.0, 1.0, rng)
    }

    #[test]
    fn embed_is_unit_norm_and_deterministic() {
        let m = FeatureExtractor::new(ExtractorConfig::new([3, 16, 8], 4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = random_image(&mut rng);
            let a = m.embed(&x).unwrap();
            let b = m.embed(&x).unwrap();
            assert_eq!(a, b);
            assert!((a.norm_l2() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embed_many_matches_single() {
        let m = FeatureExtractor::new(ExtractorConfig::new([3, 16, 8], 4), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Tensor> = (0..3).map(|_| random_image(&mut rng)).collect();
        let batch = m.embed_many(&xs).unwrap();
        for (x, e) in xs.iter().zip(&batch) {
            assert!(m.embed(x).unwrap().max_abs_diff(e).unwrap() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let m = FeatureExtractor::new(ExtractorConfig::new([3, 16, 8], 4), 1).unwrap();
        assert!(m.embed(&Tensor::zeros(vec![3, 8, 8])).is_err());
    }

    #[test]
    fn single_identity_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<LabeledImage> = (0..4)
            .map(|_| LabeledImage {
                image: random_image(&mut rng),
                label: 0,
            })
            .collect();
        let err = train_extractor(&data, &[], &ExtractorTrainConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("2 identities"));
    }

    #[test]
    fn save_load_round_trip() {
        let m = FeatureExtractor::new(ExtractorConfig::new([3, 16, 8], 5), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fadekit");
        m.save(&p).unwrap();
        assert_eq!(FeatureExtractor::load(&p).unwrap(), m);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<LabeledImage> = (0..8)
            .map(|i| LabeledImage {
                image: random_image(&mut rng),
                label: i % 2,
            })
            .collect();
        let cfg = ExtractorTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let seed = rng.gen();
        let (a, la) = train_extractor(&data, &[], &cfg, seed).unwrap();
        let (b, lb) = train_extractor(&data, &[], &cfg, seed).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }
}
