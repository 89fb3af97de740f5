//! `tmsp`: data generation, training, evaluation, ablation, prediction and
//! gradient checks for the manipulation success predictor.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] tmsp_core::Error),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use tmsp_core::Error as E;
        match self {
            CliError::GradCheck(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Io { .. } => 3,
                E::Diverged { .. } => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tmsp",
    version,
    about = "Trajectory-conditioned manipulation success prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for tmsp_core::world::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Val => Self::Val,
            SplitArg::Test => Self::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic episode file.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (episodes.jsonl, stats.json, resolved config).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured seed.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Train a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of an episode file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full, linear-baseline and trajectory-disabled variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `<id>\t<probability>\t<success|fail>` per episode.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode_file: PathBuf,
        /// Comma-separated episode ids; all episodes when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Finite-difference gradient check of every op and parameter group.
    Gradcheck {
        /// Model section to check; the built-in tiny model when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("TMSP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "TMSP_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            n,
            seed,
            config,
            out,
        } => commands::gen_data(n, seed, &config, &out),
        Command::Train {
            data,
            seed,
            config,
            out,
        } => commands::train(&data, seed, &config, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => commands::eval(&checkpoint, &data, split.into(), out.as_deref()),
        Command::Ablate { data, config, out } => commands::ablate(&data, &config, &out),
        Command::Predict {
            checkpoint,
            episode_file,
            ids,
        } => commands::predict(&checkpoint, &episode_file, &ids),
        Command::Gradcheck {
            config,
            seed,
            corrupt_op,
        } => commands::gradcheck(config.as_deref(), seed, corrupt_op.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
