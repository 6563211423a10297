use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unsupported kernel {kh}x{kw}: {reason}")]
    UnsupportedKernel {
        kh: usize,
        kw: usize,
        reason: &'static str,
    },

    #[error("batch norm needs at least 2 elements per channel in train mode, got {count}")]
    DegenerateBatch { count: usize },

    #[error("target sample {sample} has zero norm")]
    DegenerateSample { sample: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {context} (tensor {tensor}, element {element}: {value})")]
    NonFinite {
        context: String,
        tensor: usize,
        element: usize,
        value: f64,
    },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient {env} samples: need {needed}, pool has {available}")]
    InsufficientData {
        env: String,
        needed: usize,
        available: usize,
    },

    #[error("normalization range is zero (min = max = {value})")]
    ZeroRange { value: f64 },

    #[error("bad magic in {path}: expected \"CSID\"")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::AtIteration { .. } => e,
            e => Error::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }
}
