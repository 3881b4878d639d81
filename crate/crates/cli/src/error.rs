use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: key '{key}' given twice")]
    DuplicateKey { key: String, line: usize },

    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },

    #[error("line {line}: invalid value '{value}' for {key}: {reason}")]
    Parse {
        key: String,
        value: String,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("missing input {path}: {reason}")]
    MissingInput { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] cryptoseq::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status: 1 configuration, 2 missing input, 3 divergence, 4 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey { .. }
            | CliError::DuplicateKey { .. }
            | CliError::Syntax { .. }
            | CliError::Parse { .. }
            | CliError::Invalid(_) => 1,
            CliError::MissingInput { .. } => 2,
            CliError::Core(cryptoseq::Error::Divergence { .. }) => 3,
            CliError::Core(_) | CliError::Io { .. } => 4,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}
