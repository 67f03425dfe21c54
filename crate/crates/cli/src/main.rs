//! `omniweights`: checkpoint merging, parameter-shift analysis, attention-head
//! surgery, multiple-choice scoring and the toy transformer lab.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or usage. Errors are
//! reported as one line on stderr: `error[<kind>]: <message>`.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omniweights_toylab::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Validation(_) => "validation",
        }
    }
}

impl From<omniweights_core::Error> for CliError {
    fn from(e: omniweights_core::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Core(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "omniweights", version, about = "Merge, compare and dissect model checkpoints")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOptions {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "OMNIWEIGHTS_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    #[arg(long, global = true, default_value = "warn", value_parser = ["error", "warn", "info", "debug", "trace"])]
    pub log_level: String,
    /// Seed used where a subcommand does not set its own.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the tensors of an archive.
    Inspect(commands::InspectArgs),
    /// Mean absolute parameter shift of fine-tuned models against a base.
    Delta(commands::DeltaArgs),
    /// Rank delta reports by global shift.
    Ratio(commands::RatioArgs),
    /// Merge checkpoints according to a recipe.
    Merge(commands::MergeArgs),
    /// Resolve a merge recipe into a plan without writing tensors.
    Plan(commands::MergeArgs),
    /// Ablate one attention head by zeroing its output-projection slice.
    MaskHead(commands::MaskHeadArgs),
    /// Write one ablated archive per attention head.
    MaskGrid(commands::MaskGridArgs),
    /// Score multiple-choice records.
    Score(commands::ScoreArgs),
    /// Build a head-salience grid from per-head records.
    Grid(commands::GridArgs),
    /// Initialize a toy transformer.
    LabInit(commands::LabInitArgs),
    /// Train a toy transformer.
    LabTrain(commands::LabTrainArgs),
    /// Evaluate a toy transformer and emit choice records.
    LabEval(commands::LabEvalArgs),
    /// Continued training with evaluation at every step of a grid.
    LabSweep(commands::LabSweepArgs),
    /// Cosine similarity and 2-D projection of parameter deltas.
    LabDirections(commands::LabDirectionsArgs),
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&rendered).trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };

    env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
