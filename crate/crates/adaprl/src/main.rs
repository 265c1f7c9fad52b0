use std::path::PathBuf;
use std::process::ExitCode;

use adaprl::{cmd_predict, cmd_sweep, cmd_train, AppError, Options};
use clap::{Parser, Subcommand};

/// Pairwise regression training lab.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Parallel runs for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seeds per grid point (overrides the config).
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write checkpoint, log and metrics.
    Train { config: PathBuf },
    /// Run the config's sweep with paired baselines.
    Sweep { config: PathBuf },
    /// Predict with uncertainty bands from a checkpoint.
    Predict {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
}

fn seed_from_env() -> Result<Option<u64>, AppError> {
    match std::env::var("ADAPRL_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| AppError::Config(format!("`ADAPRL_SEED` must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<i32, AppError> {
    let opts = Options {
        seed: seed_from_env()?,
        out: cli.out,
        repeats: cli.repeats,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::Train { config } => {
            let s = cmd_train(&config, &opts)?;
            println!("{}", s.dir.display());
            println!("valid mse {} test mse {}", s.metrics.valid.mse, s.metrics.test.mse);
            Ok(0)
        }
        Command::Sweep { config } => {
            let s = cmd_sweep(&config, &opts)?;
            println!("{}", s.dir.display());
            for r in s.detail.iter().filter(|r| !r.ok()) {
                eprintln!("{} = {} seed {} ({}): {}", r.sweep, r.value, r.seed, r.arm, r.status);
            }
            Ok(s.failure.unwrap_or(0))
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let n = cmd_predict(&checkpoint, &input, &output)?;
            println!("{n} rows");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("adaprl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
