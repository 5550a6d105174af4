//! Experiment front-end for `batchaug`: configuration, the five subcommands and their
//! CSV / JSON outputs.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;

pub use commands::{run, Command};
pub use config::{ConfigError, ExperimentConfig};
pub use manifest::RunManifest;

/// A failed run, classified by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
    Equivalence(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Equivalence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Diverged(m) => write!(f, "diverged: {m}"),
            CliError::Equivalence(m) => write!(f, "equivalence failure: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<batchaug_core::Error> for CliError {
    fn from(e: batchaug_core::Error) -> Self {
        use batchaug_core::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Diverged(_) => CliError::Diverged(e.to_string()),
            E::Consistency { .. } => CliError::Equivalence(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
