//! The attacker's recovery network: two strided conv blocks down, two
//! nearest-upsample conv blocks up, a residual connection from the input and
//! a final clamp to `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{TrainingLog, TrainingRecord};
use super::optim::{Optimizer, OptimizerConfig};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };
const SAME: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryNet {
    shape: [usize; 3],
    params: ParamSet,
}

impl RecoveryNet {
    /// `shape` is `(c, h, w)` with `h` and `w` multiples of 4.
    pub fn new(shape: [usize; 3], channels: [usize; 2], seed: u64) -> Result<Self> {
        let [c, h, w] = shape;
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "recovery net input {shape:?} needs h, w divisible by 4"
            )));
        }
        if channels.contains(&0) {
            return Err(Error::Config("recovery net channels must be positive".into()));
        }
        let [c1, c2] = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [
            ("enc1", c, c1),
            ("enc2", c1, c2),
            ("dec1", c2, c1),
            ("dec2", c1, c1),
            ("out", c1, c),
        ];
        let mut entries = Vec::new();
        for (name, cin, cout) in layers {
            let fan_in = cin * 9;
            let std = if name == "out" {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            entries.push((
                format!("{name}.weight"),
                Tensor::randn(vec![cout, cin, 3, 3], std, &mut rng),
            ));
            entries.push((format!("{name}.bias"), Tensor::zeros(vec![cout])));
        }
        Ok(Self {
            shape,
            params: ParamSet::new(entries),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(&self, g: &mut Graph, w: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..] != self.shape {
            return Err(Error::shape(
                "recover",
                format!("network expects [b, {:?}], got {s:?}", self.shape),
            ));
        }
        let mut h = g.conv2d(x, w[0], Some(w[1]), DOWN)?;
        h = g.relu(h)?;
        h = g.conv2d(h, w[2], Some(w[3]), DOWN)?;
        h = g.relu(h)?;
        h = g.upsample_nearest2d(h, 2)?;
        h = g.conv2d(h, w[4], Some(w[5]), SAME)?;
        h = g.relu(h)?;
        h = g.upsample_nearest2d(h, 2)?;
        h = g.conv2d(h, w[6], Some(w[7]), SAME)?;
        h = g.relu(h)?;
        h = g.conv2d(h, w[8], Some(w[9]), SAME)?;
        let r = g.add(h, x)?;
        g.clamp(r, 0.0, 1.0)
    }

    /// Maps one protected `(c, h, w)` image to a recovered image in `[0, 1]`.
    pub fn recover(&self, protected: &Tensor) -> Result<Tensor> {
        Ok(self.recover_many(std::slice::from_ref(protected))?.remove(0))
    }

    pub fn recover_many(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let w = self.params.bind(&mut g, false);
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let x = g.constant(Tensor::stack(&refs)?);
            let y = self.forward(&mut g, &w, x)?;
            out.extend(g.value(y).unstack()?);
        }
        Ok(out)
    }

    /// Gradients of the mean L1 loss on one batch, in parameter order.
    pub fn batch_gradients(&self, protected: &[&Tensor], original: &[&Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, true);
        let x = g.constant(Tensor::stack(protected)?);
        let target = g.constant(Tensor::stack(original)?);
        let y = self.forward(&mut g, &w, x)?;
        let loss = g.l1_distance(y, target)?;
        g.backward(loss)?;
        Ok((g.value(loss).item()?, self.params.grads(&g, &w)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, shape: [usize; 3]) -> Result<Self> {
        let params = ParamSet::load(path)?;
        let c1 = params
            .get("enc1.weight")
            .and_then(|t| t.shape().first().copied())
            .unwrap_or(0);
        let c2 = params
            .get("enc2.weight")
            .and_then(|t| t.shape().first().copied())
            .unwrap_or(0);
        let template = RecoveryNet::new(shape, [c1, c2], 0)?;
        template.params.expect_layout(&params)?;
        Ok(Self { shape, params })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub channels: [usize; 2],
}

impl Default for RecoveryTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-3),
            channels: [16, 32],
        }
    }
}

/// Trains a recovery network on `(protected, original)` pairs by minimising
/// the mean L1 distance between recovered and original images.
pub fn train_recovery(
    pairs: &[(Tensor, Tensor)],
    cfg: &RecoveryTrainConfig,
    seed: u64,
) -> Result<(RecoveryNet, TrainingLog)> {
    let (p0, _) = pairs
        .first()
        .ok_or_else(|| Error::invalid("recovery training needs at least one pair"))?;
    for (p, o) in pairs {
        if p.shape() != p0.shape() || o.shape() != p0.shape() {
            return Err(Error::shape(
                "train_recovery",
                format!(
                    "pair shapes {:?}/{:?} differ from {:?}",
                    p.shape(),
                    o.shape(),
                    p0.shape()
                ),
            ));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let shape: [usize; 3] = p0.shape().try_into().map_err(|_| {
        Error::shape(
            "train_recovery",
            format!("images must be (c, h, w), got {:?}", p0.shape()),
        )
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RecoveryNet::new(shape, cfg.channels, rng.gen())?;
    let mut opt = Optimizer::new(cfg.optimizer, net.params.tensors())?;
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let prot: Vec<&Tensor> = batch.iter().map(|&i| &pairs[i].0).collect();
            let orig: Vec<&Tensor> = batch.iter().map(|&i| &pairs[i].1).collect();
            let (loss, grads) = net.batch_gradients(&prot, &orig)?;
            loss_sum += loss * batch.len() as f64;
            opt.step(net.params.tensors_mut(), &grads)?;
        }
        log.records.push(TrainingRecord {
            step: epoch,
            loss: loss_sum / pairs.len() as f64,
            accuracy: None,
            batch_loss: None,
        });
    }
    Ok((net, log))
}
