mod config;
mod gaussian_cmd;
mod gmm_cmd;
mod lm_cmd;
mod report;
mod run;
mod svg;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collapse_core::corpus::read_questions_tsv;
use collapse_core::mathcore::{eta, stabilizing_threshold, SamplingBias, TailThreshold};
use collapse_core::metrics::kr_score;
use collapse_core::tinylm::read_checkpoint;

use config::Config;
use run::scalar;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] collapse_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}

/// Recursive-training experiments on Gaussians, Gaussian mixtures and a tiny
/// language model.
#[derive(Debug, Parser)]
#[command(name = "collapse-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the variance amplification of a two-sided tail filter.
    Eta {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
    },
    /// Print the tail threshold that cancels a sampling bias.
    Stabilize {
        #[arg(long, allow_negative_numbers = true)]
        lambda: f64,
    },
    /// Run the recursive 1-D Gaussian loop.
    Gaussian {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the recursive Gaussian-mixture loop, one arm per clip percentile.
    Gmm {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run staged language-model training, one arm per loss.
    Lm {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on a knowledge-retention question file.
    KrEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        questions: PathBuf,
    },
    /// Aggregate the CSVs of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Also draw line charts as SVG.
        #[arg(long)]
        svg: bool,
    },
}

fn load(path: Option<&Path>) -> Result<Config, CliError> {
    path.map_or_else(|| Ok(Config::empty()), Config::load)
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Eta { a } => {
            let a = TailThreshold::new(a).map_err(|e| CliError::Config(e.to_string()))?;
            println!("{}", scalar(eta(a)));
        }
        Command::Stabilize { lambda } => {
            let lambda = SamplingBias::new(lambda).map_err(|e| CliError::Config(e.to_string()))?;
            println!("{}", scalar(stabilizing_threshold(lambda).get()));
        }
        Command::Gaussian { config } => gaussian_cmd::run(&load(config.as_deref())?)?,
        Command::Gmm { config } => gmm_cmd::run(&load(config.as_deref())?)?,
        Command::Lm { config } => lm_cmd::run(&load(config.as_deref())?)?,
        Command::KrEval { checkpoint, questions } => {
            let params = read_checkpoint(open(&checkpoint)?)?;
            let questions = read_questions_tsv(open(&questions)?)?;
            println!("{}", scalar(kr_score(&params, &questions)?));
        }
        Command::Report { run, svg } => {
            for name in report::run(&run, svg)? {
                eprintln!("wrote {}", run.join("report").join(name).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
