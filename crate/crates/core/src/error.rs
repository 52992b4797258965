use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("LoRA target pattern `{0}` matched no weight")]
    UnmatchedTarget(String),

    #[error("rank {rank} too large for `{target}` (at most {max})")]
    RankTooLarge {
        target: String,
        rank: usize,
        max: usize,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data generation: {0}")]
    Generation(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("experiment: {0}")]
    Experiment(String),

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
