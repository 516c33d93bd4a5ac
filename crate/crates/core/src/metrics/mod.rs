//! Image quality (PSNR, SSIM), pixel-distribution normality (Anderson–Darling)
//! and retrieval quality (CMC, mAP, mINP).

mod ad;
mod image;
mod retrieval;

pub use ad::{ad_statistic, image_set_ad, AdMode, AD_MIN_SAMPLES};
pub use image::{psnr, ssim, SSIM_WINDOW};
pub use retrieval::{cmc_rank_k, m_inp, mean_ap, RankedRetrieval};
