use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MoleError>;

#[derive(Debug, Error)]
pub enum MoleError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite evaluation while perturbing parameter `{param}`")]
    Evaluation { param: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),

    #[error("checkpoint: truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: hash mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("checkpoint: malformed ({0})")]
    Malformed(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MoleError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MoleError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MoleError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 1 for validation-type failures, 2 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            MoleError::Numeric(_) | MoleError::Evaluation { .. } => 2,
            _ => 1,
        }
    }
}
