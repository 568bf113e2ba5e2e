//! Argument parsing and dispatch for the `gasformer` executable.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or
//! configuration errors.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<gasformer::Error> for CliError {
    fn from(e: gasformer::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "gasformer", version, about = "Gas plume segmentation: training, evaluation, inference and mask labeling")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration file (sections: model, train, labeler, synth).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (or file, for commands that write one file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset directory.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(commands::EvalArgs),
    /// Predict masks for one image or a directory of images.
    Infer(commands::InferArgs),
    /// Generate masks from plume frames and background frames.
    Label(commands::LabelArgs),
    /// Write a synthetic plume dataset.
    Synth(commands::SynthArgs),
    /// Print parameter count and FLOPs of a configuration.
    Inspect(commands::InspectArgs),
    /// Time forward passes.
    Bench(commands::BenchArgs),
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match commands::dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
