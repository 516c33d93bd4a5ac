use std::sync::OnceLock;

use fadekit::harness::{ExperimentPlan, Pipeline};
use fadekit::metrics::ssim;
use fadekit::nets::{train_recovery, FeatureExtractor, RecoveryTrainConfig, TrainingLog};
use fadekit::protect::gaussian_blur;
use fadekit::synth::{DatasetSplits, ViewRender};
use fadekit::tensor::Tensor;

struct Trained {
    _dir: tempfile::TempDir,
    data: DatasetSplits,
    model: FeatureExtractor,
    log: TrainingLog,
}

/// The default plan's dataset and extractor, trained once per process.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let plan = ExperimentPlan {
            out_dir: dir.path().to_path_buf(),
            ..ExperimentPlan::default()
        };
        let p = Pipeline::new(plan, 0).unwrap();
        p.gen_data().unwrap();
        let log = p.train_extractor().unwrap();
        Trained {
            data: p.dataset().unwrap(),
            model: p.extractor().unwrap(),
            log,
            _dir: dir,
        }
    })
}

fn images(views: &[ViewRender]) -> Vec<Tensor> {
    views.iter().map(|v| v.image.clone()).collect()
}

fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn default_extractor_reaches_holdout_accuracy() {
    let acc = trained().log.holdout_accuracy.unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}

#[test]
fn epoch_loss_falls_across_five_epoch_windows() {
    let losses = trained().log.losses();
    assert_eq!(losses.len(), 100);
    let blocks: Vec<f64> = losses
        .chunks(5)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for (i, w) in blocks.windows(2).enumerate() {
        assert!(w[1] <= w[0], "epochs {}..{}: {} -> {}", 5 * i, 5 * i + 10, w[0], w[1]);
    }
}

#[test]
fn identities_cluster_in_embedding_space() {
    let t = trained();
    let emb = t.model.embed_many(&images(&t.data.gallery)).unwrap();
    let ids: Vec<usize> = t.data.gallery.iter().map(|v| v.identity_id).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let d = emb[i].zip_map(&emb[j], |a, b| a - b).unwrap().norm_l2();
            if ids[i] == ids[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    assert!(intra < inter, "intra {intra} inter {inter}");
}

#[test]
fn identity_pairs_teach_the_identity_map() {
    let data = &trained().data;
    let train = images(&data.train);
    let pairs: Vec<(Tensor, Tensor)> = train.iter().map(|x| (x.clone(), x.clone())).collect();
    let (net, _) = train_recovery(&pairs, &RecoveryTrainConfig::default(), 5).unwrap();
    let fit = train.iter().map(|x| mean_l1(&net.recover(x).unwrap(), x)).sum::<f64>() / train.len() as f64;
    assert!(fit < 0.02, "training-pair L1 {fit}");
    for x in images(&data.gallery).iter().take(8) {
        let r = net.recover(x).unwrap();
        assert!(r.min() >= 0.0 && r.max() <= 1.0);
        assert!(mean_l1(&r, x) < 0.05);
    }
}

#[test]
fn blur_is_largely_recoverable() {
    let data = &trained().data;
    let blur = |xs: Vec<Tensor>| -> Vec<Tensor> { xs.iter().map(|x| gaussian_blur(x, 3).unwrap()).collect() };
    let train = images(&data.train);
    let pairs: Vec<(Tensor, Tensor)> = blur(train.clone()).into_iter().zip(train).collect();
    let (net, _) = train_recovery(&pairs, &RecoveryTrainConfig::default(), 6).unwrap();
    let held = images(&data.gallery);
    let rec = net.recover_many(&blur(held.clone())).unwrap();
    let s = held.iter().zip(&rec).map(|(o, r)| ssim(o, r).unwrap()).sum::<f64>() / held.len() as f64;
    assert!(s > 0.6, "held-out recovered SSIM {s}");
}
