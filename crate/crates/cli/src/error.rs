use std::path::{Path, PathBuf};

/// Failures surfaced by the command-line harness, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] kldd::Error),
}

impl CliError {
    /// 2 for configuration, 3 for data, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                kldd::Error::InvalidArgument(_) => 2,
                kldd::Error::NonFinite(_) => 4,
                kldd::Error::Shape(_) | kldd::Error::Data { .. } | kldd::Error::Io(_) => 3,
                kldd::Error::Tape(_) => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

pub(crate) fn data_err(path: &Path, reason: impl ToString) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}
