//! Trains the embedding model on the default synthetic dataset.
//!
//! ```text
//! cargo run --release --example train_extractor -- [EPOCHS]
//! ```

use fadekit::nets::{train_extractor, ExtractorTrainConfig, LabeledImage};
use fadekit::synth::{gen_dataset_with, DatasetConfig, ViewRender};

fn labelled(views: &[ViewRender]) -> Vec<LabeledImage> {
    views
        .iter()
        .map(|v| LabeledImage {
            image: v.image.clone(),
            label: v.identity_id,
        })
        .collect()
}

fn main() -> fadekit::error::Result<()> {
    let epochs = std::env::args().nth(1).map_or(100, |s| s.parse().expect("epochs"));
    let data = gen_dataset_with(&DatasetConfig::default(), 7)?;
    let cfg = ExtractorTrainConfig {
        epochs,
        ..ExtractorTrainConfig::default()
    };
    let (model, log) = train_extractor(&labelled(&data.train), &labelled(&data.query), &cfg, 1)?;
    for r in log.records.iter().step_by((epochs / 10).max(1)) {
        println!(
            "epoch {:>3}  loss {:.4}  train acc {:.3}",
            r.step,
            r.loss,
            r.accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("held-out accuracy {:.4}", log.holdout_accuracy.unwrap_or(f64::NAN));
    println!(
        "{} parameters, {}-d embedding",
        model.params().count(),
        model.embed_dim()
    );
    Ok(())
}
