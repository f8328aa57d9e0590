use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The embedded obstacle swallowed every element of the background mesh.
    #[error("degenerate domain: no active elements for this parameter")]
    DegenerateDomain,

    #[error("linear solve failed at iteration {iteration}: {reason}")]
    LinearSolve { iteration: usize, reason: String },

    #[error("requested {requested} modes but the numerical rank admits at most {max}")]
    RankExceeded { requested: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mesh signature mismatch: basis was built on a different background mesh")]
    MeshMismatch,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
