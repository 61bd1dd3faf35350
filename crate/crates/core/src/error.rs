use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("manifest error at record {index}: {message}")]
    Manifest { index: usize, message: String },

    #[error("infeasible episode: {0}")]
    Feasibility(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("mapping error: {0}")]
    Mapping(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Feasibility(_) => 2,
            Error::Format(_)
            | Error::Manifest { .. }
            | Error::Length(_)
            | Error::Mapping(_)
            | Error::Io { .. } => 3,
            Error::Dimension(_) | Error::DegenerateEmbedding(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
