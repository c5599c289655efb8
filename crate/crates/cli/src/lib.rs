//! The `rrank` command line: synthetic data generation, training,
//! evaluation and multi-seed reporting.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Caps the worker pool when set to a positive integer.
pub const THREADS_ENV: &str = "RRESCUE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "rrank", version, about = "Rank-augmented fine-tuning on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate candidate-set JSONL and its manifest.
    GenData(commands::GenDataArgs),
    /// Write an untrained checkpoint sized for a dataset.
    Init(commands::InitArgs),
    /// Likelihood pretraining on one random candidate per set.
    Pretrain(commands::PretrainArgs),
    /// Order candidates, extract pairs and train.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint and write a report and score CSV.
    Eval(commands::EvalArgs),
    /// Aggregate reports into per-strategy mean ± stddev.
    Report(commands::ReportArgs),
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Init(a) => commands::init(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Report(a) => commands::report_cmd(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    use rrank::Error;
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::StrategyInapplicable(_)) => EXIT_USAGE,
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
