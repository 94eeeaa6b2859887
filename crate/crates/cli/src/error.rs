use std::fmt;
use std::process::ExitCode;

use vrl_core::Error;

/// Command failure, one variant per exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values (exit 2).
    Usage(String),
    /// Input file or directory not found (exit 3).
    Missing(String),
    /// Malformed config, record, checkpoint or CSV (exit 4).
    Schema(String),
    /// Checkpoint and dataset dimensions disagree (exit 5).
    Incompatible(String),
    /// Numerical or I/O failure while running (exit 6).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Schema(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Runtime(_) => 6,
        })
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(format!("{}: {e}", path.display()))
        } else {
            CliError::Runtime(format!("{}: {e}", path.display()))
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Schema(m) => write!(f, "invalid input: {m}"),
            CliError::Incompatible(m) => write!(f, "incompatible inputs: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Shape(m) => CliError::Incompatible(m),
            Error::Format(m) => CliError::Schema(m),
            Error::Domain(m) | Error::InvalidArgument(m) => CliError::Usage(m),
            Error::Io(m) if m.contains("No such file") || m.contains("not found") => CliError::Missing(m),
            Error::Io(m) | Error::Numeric(m) | Error::StaleCache(m) => CliError::Runtime(m),
        }
    }
}
