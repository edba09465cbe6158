use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: usize,
        limit: usize,
    },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("scheme contract violated: {0}")]
    SchemeContract(String),

    #[error("unknown fusion scheme `{given}` (valid: {valid})")]
    UnknownScheme { given: String, valid: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint version error: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint manifest mismatch: {0}")]
    CheckpointManifest(String),

    #[error("checkpoint payload truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
