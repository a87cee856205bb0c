//! Command-line front end for `mvgps`: dataset ingestion, weight estimation,
//! balance reports, estimable regions, dose-response surfaces and the
//! simulation study.

pub mod args;
pub mod commands;
pub mod data;
pub mod manifest;

use std::path::PathBuf;

use thiserror::Error;

pub use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mvgps::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for input and validation errors, 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Weights(a) => commands::weights(&a),
        Command::Balance(a) => commands::balance(&a),
        Command::Surface(a) => commands::surface(&a),
        Command::Hull(a) => commands::hull(&a),
        Command::Study(a) => commands::study(&a),
        Command::Scenario(a) => commands::scenario(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}
