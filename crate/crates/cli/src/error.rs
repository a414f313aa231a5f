use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {origin}: field `{field}`: {detail}")]
    Config {
        origin: PathBuf,
        field: String,
        detail: String,
    },

    #[error(transparent)]
    Core(#[from] albedo_core::Error),
}

impl CliError {
    /// 2 usage, 3 data or format, 4 numeric or internal failure.
    pub fn exit_code(&self) -> i32 {
        use albedo_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Core(e) => match e {
                E::Parameter(_) => 2,
                E::Dimension(_) | E::Format { .. } | E::Version { .. } | E::Io { .. } | E::State(_) => 3,
                E::Numeric { .. } | E::Invariant(_) => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
