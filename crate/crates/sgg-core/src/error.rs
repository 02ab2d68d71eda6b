use std::path::PathBuf;
use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's precondition.
    #[error("{op}: dimension mismatch: {detail}")]
    Dim { op: &'static str, detail: String },

    /// A softmax neighborhood with every index masked out.
    #[error("{op}: empty neighborhood (all indices masked)")]
    EmptyNeighborhood { op: &'static str },

    /// An index outside its container.
    #[error("{what}: index {index} out of range (bound {bound})")]
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A scalar argument outside its mathematical domain.
    #[error("{what}: {detail}")]
    Domain { what: &'static str, detail: String },

    /// An invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("invalid data: {0}")]
    Data(String),

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
