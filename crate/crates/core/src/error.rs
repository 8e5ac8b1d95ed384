use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate embedding: row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("failed to load checkpoint {path}: {reason}")]
    CheckpointLoad { path: PathBuf, reason: String },

    #[error("checkpoint incompatible with architecture; offending tensors: {}", .offending.join(", "))]
    CheckpointIncompatible { offending: Vec<String> },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::DegenerateInput(_)
            | Error::CheckpointLoad { .. }
            | Error::CheckpointIncompatible { .. }
            | Error::Json(_) => 3,
            Error::Numerical(_) | Error::ZeroNorm { .. } => 4,
            Error::Contract(_) | Error::Tensor(_) => 1,
        }
    }
}
