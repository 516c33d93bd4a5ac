//! Runs every stage of an experiment plan and prints the results table.
//!
//! ```text
//! cargo run --release --example full_pipeline -- [PLAN.toml] [RUN_DIR]
//! ```
//!
//! Without a plan the built-in defaults are used (the same values as
//! `plans/default.toml`).

use fadekit::harness::{ExperimentPlan, Pipeline};

fn main() -> fadekit::error::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut plan = match args.next() {
        Some(path) => ExperimentPlan::load(path.as_ref())?,
        None => ExperimentPlan::default(),
    };
    if let Some(out) = args.next() {
        plan.out_dir = out.into();
    }
    let report = Pipeline::new(plan, 0)?.run_all()?;
    print!("{}", report.to_table());
    Ok(())
}
