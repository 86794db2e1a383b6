use std::path::PathBuf;

/// Errors produced by the inference library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed parameter `{name}`: expected length {expected}, got {got}")]
    MalformedParameter {
        name: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite {what}{}", branch.map(|b| format!(" at branch {b}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        branch: Option<usize>,
    },

    #[error("non-finite gradient entry {index} rejected at step {step}")]
    NonFiniteGradient { index: usize, step: u64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
