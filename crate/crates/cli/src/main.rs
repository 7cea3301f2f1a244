//! `vboost` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 failure during
//! fitting or while writing outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "vboost", version, about = "Variational boosting for posterior approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed (the oracle seed for `compare`).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `vboost.eval_samples`.
    #[arg(long)]
    eval_samples: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            eval_samples: self.eval_samples,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a mixture and write mixture.json, trace.csv, stages.csv and config.resolved.json.
    Run(Common),
    /// Run the rank sweep only and write rank_sweep.csv.
    Rank(Common),
    /// Compare a fitted mixture's moments with a reference and write compare_moments.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Fitted mixture JSON.
        #[arg(long)]
        mixture: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Run(c) => commands::cmd_run(&c.config, &c.overrides()),
        Command::Rank(c) => commands::cmd_rank(&c.config, &c.overrides()),
        Command::Compare { common, mixture } => commands::cmd_compare(mixture, &common.config, &common.overrides()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vboost: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
