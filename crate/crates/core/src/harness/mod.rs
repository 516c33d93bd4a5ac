//! End-to-end experiments: data generation, extractor training, gallery
//! protection, the recovery attack, retrieval evaluation and reports, all
//! inside one run directory.

mod plan;
mod report;
mod stages;

pub use plan::{ExperimentPlan, PlanOverrides, Setting};
pub use report::{AttackMetrics, ChaosCell, EvalReport, ProtectorRow, Provenance, RetrievalCell};
pub use stages::{chaos_subset, ImageSummary, Pipeline, RunLayout, NO_PROTECTION, ORIGINAL};
