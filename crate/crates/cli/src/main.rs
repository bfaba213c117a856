//! `seedlab`: data generation, training, distillation, quantization and
//! evaluation for the editing-diffusion laboratory.
//!
//! Exit codes: 0 success, 2 usage, 3 config, 4 runtime contract violation.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Flags;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "seedlab", version, about = "Desk-scale editing-diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Model checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset file (JSON lines).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Quantization table from `quantize`; runs the net with integer kernels.
    #[arg(long, global = true)]
    schemes: Option<PathBuf>,
    /// Float teacher checkpoint to compare against (`bench`).
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate training and held-out editing pairs.
    GenData,
    /// Train a teacher velocity net.
    Train,
    /// Distill a teacher into a guidance-embedded few-step student.
    Distill,
    /// Calibrate and quantize a checkpoint's dense layers.
    Quantize,
    /// Sample edits for every record of a dataset.
    Sample,
    /// Sample and score a dataset.
    Eval,
    /// Guidance-scale trade-off sweep, as CSV.
    Sweep,
    /// Cost-model and wall-clock comparison against the float teacher.
    Bench,
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("SEEDLAB_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(CliError::Usage(format!("SEEDLAB_LOG must be quiet, info or debug, not {other:?}")));
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_logging()?;
    let flags = Flags {
        seed: cli.seed,
        out: cli.out,
        config: cli.config,
        checkpoint: cli.checkpoint,
        data: cli.data,
        schemes: cli.schemes,
        teacher: cli.teacher,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&flags),
        Command::Train => commands::train(&flags),
        Command::Distill => commands::distill(&flags),
        Command::Quantize => commands::quantize(&flags),
        Command::Sample => commands::sample(&flags),
        Command::Eval => commands::eval(&flags),
        Command::Sweep => commands::sweep(&flags),
        Command::Bench => commands::bench(&flags),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seedlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
