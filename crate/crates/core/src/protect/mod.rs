//! Image protection: the noise-guided progressive pixel replacement method
//! under a feature-distance constraint, plus blur, mosaic and ablation
//! variants behind a common [`Protector`] name.

mod baselines;
mod config;
mod masks;
mod noise;
mod objective;
mod pixelfade;
mod registry;

pub use baselines::{
    gaussian_blur, joint_l1_opt, mosaic, noise_weight_protect, objective_variant_protect, random_perturb,
    random_perturb_protect, ObjectiveTarget,
};
pub use config::ProtectConfig;
pub use masks::{gen_mask_schedule, MaskSchedule};
pub use noise::{sample_noise_raw, sample_noise_target, NOISE_CENTER, NOISE_SCALE};
pub use objective::{constraint_op, momentum_step, CoStep, FeatureObjective};
pub use pixelfade::{
    apply_mask, partial_replacement_op, pixelfade_protect, Phase, ProtectionResult, TraceOp, TraceRecord,
};
pub use registry::{read_trace_jsonl, write_trace_jsonl, Protector, DEFAULT_BLUR_RADIUS, DEFAULT_MOSAIC_BLOCK};
