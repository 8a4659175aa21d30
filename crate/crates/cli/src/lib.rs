//! Library behind the `craft` binary: declarative run configuration and
//! the six pipeline subcommands (ingest, generate, train, index, eval,
//! report).
//!
//! Every failure is classified as either a validation error (bad config
//! or missing input — exit code 1) or a runtime failure (the pipeline
//! itself failed — exit code 2), so scripts can tell "fix your setup"
//! apart from "the run went wrong".

pub mod commands;
pub mod config;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or missing input; exit code 1.
    Validation(String),
    /// Failure during the run itself; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}
