//! The `fadekit` command line. Progress goes to standard error; standard
//! output carries only JSON lines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use log::LevelFilter;

use crate::error::{Error, Result};
use crate::harness::{ExperimentPlan, Pipeline, PlanOverrides, Setting};

#[derive(Debug, Parser)]
#[command(
    name = "fadekit",
    version,
    about = "Privacy-protecting image transforms for re-identification galleries"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset into <out>/data.
    GenData(CommonArgs),
    /// Train the embedding model on the train split.
    TrainExtractor(CommonArgs),
    /// Protect every split with every protector of the plan.
    Protect(CommonArgs),
    /// Train one recovery network per protector and score it.
    Attack(CommonArgs),
    /// Retrieval metrics and chaos scores of the protected sets.
    Eval(EvalArgs),
    /// Assemble reports/report.jsonl and reports/report.txt.
    Report(CommonArgs),
    /// Run every stage in order.
    All(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment plan (TOML). Built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,
    /// Run directory; overrides `out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature-distance threshold; overrides `protect.epsilon`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Total protection iterations; overrides `protect.T`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Number of replacement masks; overrides `protect.I`.
    #[arg(long)]
    pub masks: Option<usize>,
    /// Momentum decay; overrides `protect.alpha`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Step size; overrides `protect.beta`.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Parallel workers for per-image work (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// More log output on standard error (repeatable).
    #[arg(short, long, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Evaluate one setting only: P2P, O2P, P2O or O2O.
    #[arg(long, value_parser = parse_setting)]
    pub setting: Option<Setting>,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CommonArgs {
    pub fn overrides(&self) -> PlanOverrides {
        PlanOverrides {
            out: self.out.clone(),
            seed: self.seed,
            epsilon: self.epsilon,
            iters: self.iters,
            masks: self.masks,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn resolve_plan(&self) -> Result<ExperimentPlan> {
        let mut plan = match &self.plan {
            Some(p) => ExperimentPlan::load(p)?,
            None => ExperimentPlan::default(),
        };
        self.overrides().apply(&mut plan)?;
        Ok(plan)
    }
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Eval(e) => &e.common,
            Command::GenData(c)
            | Command::TrainExtractor(c)
            | Command::Protect(c)
            | Command::Attack(c)
            | Command::Report(c)
            | Command::All(c) => c,
        }
    }
}

fn print_jsonl<T: serde::Serialize>(rows: &[T]) -> Result<()> {
    for r in rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let pipeline = Pipeline::new(common.resolve_plan()?, common.workers)?;
    match &cli.command {
        Command::GenData(_) => {
            pipeline.save_plan()?;
            pipeline.gen_data()
        }
        Command::TrainExtractor(_) => pipeline.train_extractor().map(|_| ()),
        Command::Protect(_) => pipeline.protect(),
        Command::Attack(_) => pipeline.attack(),
        Command::Eval(e) => {
            let settings = match e.setting {
                Some(s) => vec![s],
                None => pipeline.plan().settings.clone(),
            };
            print_jsonl(&pipeline.eval(&settings)?)
        }
        Command::Report(_) => {
            print!("{}", pipeline.report()?.to_jsonl()?);
            Ok(())
        }
        Command::All(_) => {
            print!("{}", pipeline.run_all()?.to_jsonl()?);
            Ok(())
        }
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit status: 0 success, 2 usage or configuration error, 1 anything else.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.command.common().verbose {
        0 => LevelFilter::Info,
        1 => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
