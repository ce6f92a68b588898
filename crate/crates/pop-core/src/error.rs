use std::path::PathBuf;

/// Workspace-wide error type. Variants are grouped by how the CLI maps them
/// to exit codes: configuration / usage problems exit with 1, data and
/// format problems with 2 (see `cli::exit_code_for`).
#[derive(Debug, thiserror::Error)]
pub enum PopError {
    /// Shape mismatch between operands; both shapes are always reported.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index outside its valid bound (token id, layer index, position, ...).
    #[error("{what} {index} out of bounds (limit {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// An operation produced a NaN or infinity from finite inputs.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// Invalid configuration or argument value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An API contract was violated by the caller (e.g. backward on a
    /// non-scalar, watch outside a recording scope).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Sequence would exceed the model's maximum length.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Malformed input data (corpus, JSONL, CSV).
    #[error("bad data: {0}")]
    Data(String),

    /// Malformed binary or JSON artifact (checkpoint, profile, plan).
    #[error("bad format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PopError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PopError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PopError>;
