use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid {field} at index {index}: {msg}")]
    Validation {
        field: &'static str,
        index: usize,
        msg: String,
    },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("kinematic tree has a cycle through joint {0}")]
    Cycle(usize),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("frame {frame}: {msg}")]
    Frame { frame: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("loss term `{0}` is not finite")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
