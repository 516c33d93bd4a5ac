//! Protects one gallery image with PixelFade and prints its trace.
//!
//! ```text
//! cargo run --release --example protect_image -- [RUN_DIR] [OUT.ppm]
//! ```
//!
//! Uses the dataset and extractor in RUN_DIR (default `runs/default`),
//! creating them first when absent.

use fadekit::harness::{ExperimentPlan, Pipeline};
use fadekit::metrics::{ad_statistic, psnr};
use fadekit::protect::pixelfade_protect;
use fadekit::synth::{write_image, Split};

fn main() -> fadekit::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let run = args.next().unwrap_or_else(|| "runs/default".into());
    let out = args.next().unwrap_or_else(|| "protected.ppm".into());
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
    let cfg = p.image_config(Split::Gallery, v);
    let r = pixelfade_protect(&v.image, &model, &cfg)?;
    for t in r.trace.iter().filter(|t| t.step % 10 == 0 || t.step + 5 >= cfg.t) {
        println!(
            "step {:>3} {:?} {:<3} loss {:.4} coverage {:.2}",
            t.step,
            t.phase,
            serde_json::to_string(&t.op)?.trim_matches('"'),
            t.feature_loss,
            t.coverage
        );
    }
    println!(
        "final loss {:.4} (epsilon {}), met {}; PSNR to original {:.2} dB; AD {:.3} -> {:.3}",
        r.final_loss,
        cfg.epsilon,
        r.constraint_met_at_end,
        psnr(&v.image, &r.protected)?,
        ad_statistic(v.image.data())?,
        ad_statistic(r.protected.data())?
    );
    write_image(out.as_ref(), &r.protected)?;
    println!("wrote {out}");
    Ok(())
}
