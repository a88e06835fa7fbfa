//! `wbstudio` command-line tool and HTTP service.

pub mod commands;
pub mod server;

use std::fmt;

use wbstudio_core::WbError;

/// Process exit status for a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    BadArguments = 2,
    Io = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn bad_args(message: impl Into<String>) -> Self {
        CliError {
            code: ExitCode::BadArguments,
            message: message.into(),
        }
    }

    /// Wraps a library error, prefixing `context`.
    pub fn from_wb(context: &str, e: WbError) -> Self {
        let code = if e.is_numerical() {
            ExitCode::Numerical
        } else if e.is_io() || matches!(e, WbError::MissingGroundTruth(_)) {
            ExitCode::Io
        } else {
            ExitCode::BadArguments
        };
        CliError {
            code,
            message: format!("{context}: {e}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Extension for attaching context to library results.
pub(crate) trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for wbstudio_core::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::from_wb(&context(), e))
    }
}
