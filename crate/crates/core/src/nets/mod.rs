//! Neural networks: the authorized feature extractor, the attacker's
//! recovery network, optimizers and training loops.

mod extractor;
mod log;
mod optim;
mod params;
mod recovery;

pub use extractor::{
    train_extractor, BoundExtractor, ExtractorConfig, ExtractorTrainConfig, FeatureExtractor, LabeledImage,
};
pub use log::{TrainingLog, TrainingRecord};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::ParamSet;
pub use recovery::{train_recovery, RecoveryNet, RecoveryTrainConfig};
