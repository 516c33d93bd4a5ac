//! Trains the recovery network to undo Gaussian blur and mosaic, then
//! scores its reconstructions of held-out images.
//!
//! ```text
//! cargo run --release --example recovery_attack -- [EPOCHS]
//! ```

use fadekit::metrics::{psnr, ssim};
use fadekit::nets::{train_recovery, RecoveryTrainConfig};
use fadekit::protect::{gaussian_blur, mosaic};
use fadekit::synth::{gen_dataset_with, DatasetConfig};
use fadekit::tensor::Tensor;

fn main() -> fadekit::error::Result<()> {
    let epochs = std::env::args().nth(1).map_or(60, |s| s.parse().expect("epochs"));
    let data = gen_dataset_with(&DatasetConfig::default(), 7)?;
    let cfg = RecoveryTrainConfig {
        epochs,
        ..RecoveryTrainConfig::default()
    };
    let protectors: [(&str, fn(&Tensor) -> fadekit::error::Result<Tensor>); 2] = [
        ("gaussian_blur:3", |x| gaussian_blur(x, 3)),
        ("mosaic:4", |x| mosaic(x, 4)),
    ];
    for (name, protect) in protectors {
        let pairs = data
            .train
            .iter()
            .map(|v| Ok((protect(&v.image)?, v.image.clone())))
            .collect::<fadekit::error::Result<Vec<_>>>()?;
        let (net, log) = train_recovery(&pairs, &cfg, 1)?;
        let (mut before, mut after, mut p) = (0.0, 0.0, 0.0);
        for v in &data.gallery {
            let protected = protect(&v.image)?;
            let rec = net.recover(&protected)?;
            before += ssim(&v.image, &protected)?;
            after += ssim(&v.image, &rec)?;
            p += psnr(&v.image, &rec)?;
        }
        let n = data.gallery.len() as f64;
        println!(
            "{name:<16} final train L1 {:.4}; gallery SSIM protected {:.3}, recovered {:.3}; recovered PSNR {:.2}",
            log.final_loss().unwrap_or(f64::NAN),
            before / n,
            after / n,
            p / n
        );
    }
    Ok(())
}
