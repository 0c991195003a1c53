//! Configuration-driven front end to `teugel-core`.
//!
//! A run loads an [`ExperimentConfig`](config::ExperimentConfig), applies
//! command-line overrides, executes one command and writes a
//! [`ReportBundle`](report::ReportBundle).

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use clap::ValueEnum;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use report::{emit_csv, ReportBundle};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Errors that point at the configured model or problem count as config
    /// errors; numerical failures during a run do not.
    pub fn from_core(e: teugel_core::Error) -> Self {
        use teugel_core::Error as E;
        match e {
            E::InvalidModel(_)
            | E::RankDeficient { .. }
            | E::InvalidArgument(_)
            | E::MemoryBudget { .. }
            | E::Assumption { .. } => CliError::Config(e.to_string()),
            E::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Gram matrix and orthonormality report.
    Basis,
    /// Path simulation and bracket report.
    Simulate,
    /// BSDE solves with oracle comparison where one exists.
    Bsde,
    /// Hamilton system solve, gradient and comparison checks.
    Blq,
    /// Maximum-principle suite: expansion rates, duality identity, H_u residual.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Basis => "basis",
            Command::Simulate => "simulate",
            Command::Bsde => "bsde",
            Command::Blq => "blq",
            Command::Verify => "verify",
        }
    }
}

/// Command-line options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunOptions {
    /// `--seed` and `--out` are applied as overrides after the `--set` ones.
    fn all_overrides(&self) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("monte_carlo.seed={seed}"));
        }
        if let Some(out) = &self.out {
            let quoted = toml::Value::String(out.display().to_string()).to_string();
            all.push(format!("output.directory={quoted}"));
        }
        all
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: ReportBundle,
    pub files: Vec<PathBuf>,
}

pub fn run(command: Command, config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let cfg = load_config(config_path, &opts.all_overrides())?;
    run_config(command, &cfg)
}

pub fn run_str(command: Command, text: &str, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let cfg = parse_config(text, &opts.all_overrides())?;
    run_config(command, &cfg)
}

pub fn run_config(command: Command, cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let report = commands::execute(command, cfg)?;
    let files = report.write(&cfg.output)?;
    Ok(RunOutcome { report, files })
}
