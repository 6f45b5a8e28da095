//! Command-line error type: carries enough to pick the process exit code.

use std::fmt;
use std::path::Path;

/// Errors surfaced by the CLI. Numerical failures from the modeling library
/// keep their identity so `exit_code` can distinguish them from plain
/// validation or I/O problems.
#[derive(Debug)]
pub enum CliError {
    /// A modeling-library error, wrapped with what the CLI was doing.
    Core {
        context: String,
        source: apsm_core::Error,
    },
    /// A CLI-level problem (bad arguments, missing files, malformed config).
    Msg(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core { context, source } => write!(f, "{context}: {source}"),
            CliError::Msg(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Core { source, .. } => Some(source),
            CliError::Msg(_) => None,
        }
    }
}

impl CliError {
    /// Process exit code: 2 for numerical failures (singular or non-finite
    /// linear algebra), 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core { source, .. } if source.is_numerical() => 2,
            _ => 1,
        }
    }

    pub fn msg(m: impl Into<String>) -> Self {
        CliError::Msg(m.into())
    }

    /// I/O failure on a path the CLI itself touches.
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Msg(format!("io error on {}: {err}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach CLI context to a modeling-library result.
pub trait Ctx<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Ctx<T> for apsm_core::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|source| CliError::Core {
            context: context(),
            source,
        })
    }
}
