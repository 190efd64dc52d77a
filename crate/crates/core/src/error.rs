use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("degenerate (zero-norm) vector in {0}")]
    DegenerateVector(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("answer alignment error: {0}")]
    Alignment(String),

    #[error("corpus spec error: {0}")]
    Spec(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("decoding error: {0}")]
    Decoding(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("score undefined: {0}")]
    UndefinedScore(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
