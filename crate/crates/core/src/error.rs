use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown {kind} `{name}` (available: {})", .available.join(", "))]
    Lookup {
        kind: &'static str,
        name: String,
        available: Vec<String>,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("weight container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
