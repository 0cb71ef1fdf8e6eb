use std::fmt;

use dif_core::DifError;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid config, arguments or input files (exit 2).
    Config(anyhow::Error),
    /// Training or evaluation produced a non-finite value (exit 3).
    Numeric(anyhow::Error),
    /// Outputs could not be written (exit 1).
    Output(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e:#}"),
            CliError::Numeric(e) => write!(f, "numeric failure: {e:#}"),
            CliError::Output(e) => write!(f, "output error: {e:#}"),
        }
    }
}

impl From<DifError> for CliError {
    fn from(e: DifError) -> Self {
        match e {
            DifError::NonFinite(_) => CliError::Numeric(e.into()),
            other => CliError::Config(other.into()),
        }
    }
}

pub trait Context<T> {
    /// Prefixes a core error with where it happened, keeping its class.
    fn at(self, what: &str) -> CliResult<T>;
    /// Classifies a failure as an output error.
    fn output(self, what: &str) -> CliResult<T>;
}

impl<T> Context<T> for Result<T, DifError> {
    fn at(self, what: &str) -> CliResult<T> {
        self.map_err(|e| match CliError::from(e) {
            CliError::Config(e) => CliError::Config(e.context(what.to_string())),
            CliError::Numeric(e) => CliError::Numeric(e.context(what.to_string())),
            CliError::Output(e) => CliError::Output(e.context(what.to_string())),
        })
    }

    fn output(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Output(anyhow::Error::from(e).context(what.to_string())))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn at(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Config(anyhow::Error::from(e).context(what.to_string())))
    }

    fn output(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Output(anyhow::Error::from(e).context(what.to_string())))
    }
}
