use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A volume or patch size violates a divisibility constraint.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Buffer lengths disagree.
    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    Length {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing sidecar {}", .0.display())]
    MissingSidecar(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A mask decision with no masked or no visible patches was used for training.
    #[error("degenerate mask decision: {masked} of {total} patches masked")]
    DegenerateMask { masked: usize, total: usize },

    #[error("no foreground voxels to evaluate")]
    EmptyForeground,

    #[error("insufficient reward history: need steps {first}..={last}, trace holds {held}")]
    InsufficientHistory { first: usize, last: usize, held: usize },

    #[error("empty episode buffer")]
    EmptyBuffer,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
