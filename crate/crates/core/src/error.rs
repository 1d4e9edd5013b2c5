use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("malformed attention mask: {0}")]
    Mask(String),

    #[error("reference cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("missing saved intermediates: {0}")]
    MissingIntermediates(&'static str),

    #[error("benchmark invalidated: topologies disagree (max |diff| = {max_abs_diff:e}, tolerance {tolerance:e})")]
    TopologyMismatch { max_abs_diff: f64, tolerance: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
