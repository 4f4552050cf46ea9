//! Command-line driver for the `kfrtrl` library: self-checks, copy task,
//! character language modelling and variance analysis.

pub mod check;
pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid config, missing input files.
    #[error("{0}")]
    Usage(String),
    /// Anything that went wrong after the run started.
    #[error("{0}")]
    Run(String),
}

impl From<kfrtrl::Error> for CliError {
    fn from(e: kfrtrl::Error) -> Self {
        match e {
            kfrtrl::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

const AFTER_HELP: &str = "\
Output (all CSV with a header row; manifest.toml is written first):
  check     check.csv            check,passed,detail
  copy      copy.csv             step,T,bits_per_char,estimator,seed   (one row per batch)
            checkpoint.txt
  lm        lm.csv               step,estimator,metric,value,seed      (metric: bpc | valid_bpc)
            checkpoint.txt
  variance  alignment_time.csv   t,n,estimator,cosine,seed,degenerate
            alignment_units.csv  t,n,estimator,cosine,seed,degenerate
            variance.csv         n,estimator,mean_variance,se

Exit status: 0 success, 1 failed check or run error, 2 usage or config error.";

#[derive(Debug, Parser)]
#[command(name = "kfrtrl", version, about = "Online gradient estimators for recurrent networks", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Must not already contain a run.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel repeats and batch lanes.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Gradient, factorization and estimator self-checks; prints a pass/fail table.
    Check,
    /// Copy task with a length curriculum.
    Copy,
    /// Character-level language modelling on a text file.
    Lm {
        /// Training text; overrides the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Cosine alignment with the exact gradient, and variance scaling in n.
    Variance,
}

/// Loads the config, applies overrides and runs the command.
/// `Ok(false)` means the command ran but reported a failure.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool installed by an earlier call in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    commands::ensure_fresh(&cli.out)?;
    match &cli.command {
        Command::Check => commands::cmd_check(&cfg, &cli.out),
        Command::Copy => commands::cmd_copy(&cfg, &cli.out).map(|_| true),
        Command::Lm { corpus } => commands::cmd_lm(&cfg, corpus.as_deref(), &cli.out).map(|_| true),
        Command::Variance => commands::cmd_variance(&cfg, &cli.out).map(|_| true),
    }
}
