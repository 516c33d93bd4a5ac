//! Renders the synthetic pedestrian dataset and writes it as PPM files.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [OUT_DIR]
//! ```

use fadekit::synth::{gen_dataset_with, rgb_histogram, write_dataset, DatasetConfig, Split};

fn main() -> fadekit::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/synth".into());
    let cfg = DatasetConfig::default();
    let data = gen_dataset_with(&cfg, 7)?;
    let manifest = write_dataset(out.as_ref(), &data)?;
    for split in [Split::Train, Split::Query, Split::Gallery] {
        println!("{:<8} {:>4} images", split.as_str(), data.split(split).len());
    }
    println!("{} files under {out}, shape {:?}", manifest.len(), data.image_shape());
    // two views of one identity share colours; another identity does not
    let hist = |i: usize| rgb_histogram(&data.gallery[i].image);
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let same = data
        .gallery
        .iter()
        .position(|v| v.identity_id == data.gallery[0].identity_id && v.view != data.gallery[0].view);
    let other = data
        .gallery
        .iter()
        .position(|v| v.identity_id != data.gallery[0].identity_id);
    if let (Some(s), Some(o)) = (same, other) {
        println!(
            "histogram L1 to same identity {:.3}, to another {:.3}",
            l1(&hist(0), &hist(s)),
            l1(&hist(0), &hist(o))
        );
    }
    Ok(())
}
