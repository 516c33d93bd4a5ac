//! Retrieval metrics of original and mosaic-protected images in all four
//! query/gallery settings.
//!
//! ```text
//! cargo run --release --example retrieval_eval -- [RUN_DIR]
//! ```

use fadekit::harness::{ExperimentPlan, Pipeline, Setting};
use fadekit::metrics::{cmc_rank_k, m_inp, mean_ap, RankedRetrieval};
use fadekit::protect::mosaic;
use fadekit::synth::ViewRender;
use fadekit::tensor::Tensor;

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
    let embed = |views: &[ViewRender], protect: bool| -> fadekit::error::Result<Vec<Tensor>> {
        let imgs = views
            .iter()
            .map(|v| {
                if protect {
                    mosaic(&v.image, 4)
                } else {
                    Ok(v.image.clone())
                }
            })
            .collect::<fadekit::error::Result<Vec<_>>>()?;
        model.embed_many(&imgs)
    };
    let labels = |views: &[ViewRender]| views.iter().map(|v| v.identity_id).collect::<Vec<_>>();
    println!("mosaic:4  setting  rank1     mAP    mINP");
    for s in Setting::ALL {
        let q = embed(&data.query, s.protected_query())?;
        let g = embed(&data.gallery, s.protected_gallery())?;
        let r = RankedRetrieval::from_embeddings(&q, &labels(&data.query), &g, &labels(&data.gallery))?;
        println!(
            "          {:<7} {:>6.4} {:>7.4} {:>7.4}",
            s.as_str(),
            cmc_rank_k(&r, 1)?,
            mean_ap(&r)?,
            m_inp(&r)?
        );
    }
    Ok(())
}
