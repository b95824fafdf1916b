//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between two operands; carries both shapes.
    #[error("{context}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Token id, class target or similar index outside its valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Adapter does not fit the model it was paired with.
    #[error("adapter incompatible with model: {0}")]
    AdapterCompatibility(String),

    /// Malformed or unsupported on-disk artifact.
    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
