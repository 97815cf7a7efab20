//! `dtr` command line: train, sweep, ablate, eval, and export runs of the
//! disentanglement-then-reconstruction adaptation stack.
//!
//! Every invocation creates a timestamped subdirectory under the output root
//! (`--out`, overridden by `DTR_OUT`) and writes its artifacts there with
//! fixed names. Exit codes: 0 ok, 2 config error, 3 data or artifact error,
//! 4 numeric failure, 1 anything else. Errors print one JSON line on stderr.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dtr_core::checkpoint::CheckpointError;
use dtr_core::datagen::DataError;
use dtr_core::eval::EvalError;
use dtr_core::trainer::{ConfigError, TrainError};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Numeric(m)
            | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Internal(_) => "internal",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Data(d) => CliError::Data(d.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::WrongMode { .. } => CliError::Config(e.to_string()),
            EvalError::MissingLabels { .. }
            | EvalError::InsufficientSamples { .. }
            | EvalError::PcaTooFewRows { .. } => CliError::Data(e.to_string()),
            EvalError::Data(d) => CliError::Data(d.to_string()),
            EvalError::Train(t) => CliError::from(t),
            other => CliError::Internal(other.to_string()),
        }
    }
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config file; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set tau=0.8` or `--set data.rotation_deg=60`.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output root; a timestamped run directory is created inside.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for sweep/ablation jobs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run seed (overrides the config file; `--set seed=` wins over both).
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write metrics.jsonl plus checkpoint.json.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Reconstruction-interval sensitivity sweep (full mode only).
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        r_values: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
    },
    /// Ablation table over modes B, D, D+R, DTR.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint against its config's datasets.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export dataset CSVs and 2-d feature projections.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint projected as the `pre` variant.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Parser, Debug)]
#[command(name = "dtr", version, about = "Disentanglement-then-reconstruction domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Creates `<root>/<stamp>-<label>/`, suffixing on collision.
fn make_run_dir(root: &Path, label: &str) -> Result<PathBuf, CliError> {
    let root = match std::env::var_os("DTR_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => root.to_path_buf(),
    };
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = root.join(format!("{stamp}-{label}"));
    let mut dir = base.clone();
    let mut attempt = 1;
    while dir.exists() {
        attempt += 1;
        dir = PathBuf::from(format!("{}-{attempt}", base.display()));
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            let run = config::parse_config(common.config.as_deref(), common.seed, &common.set)?;
            let dir = make_run_dir(&common.out, "train")?;
            commands::cmd_train(&run, &dir, common.quiet)
        }
        Command::Sweep { common, r_values, seeds } => {
            let run = config::parse_config(common.config.as_deref(), common.seed, &common.set)?;
            let dir = make_run_dir(&common.out, "sweep")?;
            commands::cmd_sweep(&run, &dir, &r_values, &seeds, common.jobs)
        }
        Command::Ablate { common, seeds } => {
            let run = config::parse_config(common.config.as_deref(), common.seed, &common.set)?;
            let dir = make_run_dir(&common.out, "ablate")?;
            commands::cmd_ablate(&run, &dir, &seeds, common.jobs)
        }
        Command::Eval { common, checkpoint } => {
            let run = config::parse_config(common.config.as_deref(), common.seed, &common.set)?;
            let dir = make_run_dir(&common.out, "eval")?;
            commands::cmd_eval(&run, &dir, &checkpoint)
        }
        Command::Export { common, checkpoint, baseline } => {
            let run = config::parse_config(common.config.as_deref(), common.seed, &common.set)?;
            let dir = make_run_dir(&common.out, "export")?;
            commands::cmd_export(&run, &dir, &checkpoint, baseline.as_ref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        let line = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
        eprintln!("{line}");
        std::process::exit(err.exit_code());
    }
}
