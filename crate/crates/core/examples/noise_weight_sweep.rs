//! Mean per-image AD of the protected chaos subset as the replacement noise
//! weight goes from 0.2 to 1.0.
//!
//! ```text
//! cargo run --release --example noise_weight_sweep -- [RUN_DIR]
//! ```
//!
//! Reuses the dataset and extractor in RUN_DIR (default `runs/default`),
//! creating them first when absent.

use fadekit::harness::{chaos_subset, ExperimentPlan, Pipeline};
use fadekit::metrics::image_set_ad;
use fadekit::protect::noise_weight_protect;
use fadekit::synth::Split;
use rayon::prelude::*;

fn main() -> fadekit::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/default".into());
    let plan = ExperimentPlan {
        out_dir: out.into(),
        ..ExperimentPlan::default()
    };
    let p = Pipeline::new(plan, 0)?;
    if p.extractor().is_err() {
        p.gen_data()?;
        p.train_extractor()?;
    }
    let data = p.dataset()?;
    let model = p.extractor()?;
    let subset: Vec<_> = chaos_subset(&data.gallery)
        .into_iter()
        .map(|i| &data.gallery[i])
        .collect();
    let originals: Vec<_> = subset.iter().map(|v| v.image.clone()).collect();
    let mode = p.plan().ad_mode;
    println!("weight  mean_AD   mean_L_f");
    println!("{:<6}  {:>7.3}", "orig", image_set_ad(&originals, mode)?);
    for weight in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let results = subset
            .par_iter()
            .map(|v| noise_weight_protect(&v.image, &model, weight, &p.image_config(Split::Gallery, v)))
            .collect::<fadekit::error::Result<Vec<_>>>()?;
        let protected: Vec<_> = results.iter().map(|r| r.protected.clone()).collect();
        let loss = results.iter().map(|r| r.final_loss).sum::<f64>() / results.len() as f64;
        println!("{weight:<6}  {:>7.3}  {loss:>9.4}", image_set_ad(&protected, mode)?);
    }
    Ok(())
}
