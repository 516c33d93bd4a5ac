//! Every registered protector applied to one image: feature loss, PSNR and
//! AD of the result.
//!
//! ```text
//! cargo run --release --example baselines -- [RUN_DIR]
//! ```

use fadekit::harness::{ExperimentPlan, Pipeline};
use fadekit::metrics::{ad_statistic, psnr};
use fadekit::protect::Protector;
use fadekit::synth::Split;

fn main() -> fadekit::error::Result<()> {
    let run = std::env::args().nth(1).unwrap_or_else(|| "runs/default".into());
    let p = Pipeline::new(
        ExperimentPlan {
            out_dir: run.into(),
            ..ExperimentPlan::default()
        },
        0,
    )?;
    if p.extractor().is_err() {
        p.gen_data()?;
        p.train_extractor()?;
    }
    let data = p.dataset()?;
    let model = p.extractor()?;
    let v = &data.gallery[0];
    let other = data
        .gallery
        .iter()
        .find(|o| o.identity_id != v.identity_id)
        .map(|o| &o.image);
    let cfg = p.image_config(Split::Gallery, v);
    println!("{:<24} {:>8} {:>8} {:>8}", "protector", "L_f", "PSNR", "AD");
    println!(
        "{:<24} {:>8.4} {:>8} {:>8.3}",
        "original",
        0.0,
        "inf",
        ad_statistic(v.image.data())?
    );
    for name in [
        "pixelfade",
        "gaussian_blur:3",
        "mosaic:4",
        "random_perturb:0.1",
        "joint_l1:0.5",
        "noise_weight:0.4",
        "objective:other_identity",
        "objective:zero",
        "objective:contrastive",
    ] {
        let prot: Protector = name.parse()?;
        let r = prot.apply(&v.image, &model, &cfg, other)?;
        println!(
            "{name:<24} {:>8.4} {:>8.2} {:>8.3}",
            r.final_loss,
            psnr(&v.image, &r.protected)?,
            ad_statistic(r.protected.data())?
        );
    }
    Ok(())
}
