//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid interval [{a}, {b}]: lower bound must be below upper bound")]
    InvalidInterval { a: f64, b: f64 },

    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid dimension tree: {0}")]
    InvalidTree(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported model version {0} (expected 1)")]
    UnsupportedVersion(u64),

    #[error("malformed model document: {0}")]
    Model(String),

    #[error("matricization has {size} entries, above the cap of {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("basis function {index} has squared norm {norm}, expected 1")]
    NotNormalized { index: usize, norm: f64 },

    #[error("no stable sample for {space} after {rounds} rounds (best criterion {best:.4})")]
    StabilityNotReached { space: String, rounds: usize, best: f64 },

    #[error("singular weighted least-squares system on {0}")]
    SingularSystem(String),

    #[error("oracle returned a non-finite value at grid index {index}")]
    Oracle { index: usize },

    #[error("node {node}: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with the identity of the tree node being processed.
    pub fn at_node(self, vars: &[usize]) -> Error {
        Error::Node {
            node: crate::tree::node_label(vars),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
