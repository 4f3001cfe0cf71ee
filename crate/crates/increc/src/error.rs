use thiserror::Error;

/// Errors produced by log ingestion, model evaluation, and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty log")]
    EmptyLog,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{kind} id {id} out of vocabulary (size {size})")]
    OutOfVocab {
        kind: &'static str,
        id: u64,
        size: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative pool too small: need {need} ids, {available} available")]
    PoolTooSmall { need: usize, available: usize },

    #[error("sampled softmax needs at least one negative")]
    EmptyNegatives,

    #[error("batch contains a {found} example where {expected} was required")]
    WrongSampleGroup {
        expected: &'static str,
        found: &'static str,
    },

    #[error("negative consistency weight {0}")]
    NegativeAlpha(f64),

    #[error("alignment tower has no positives")]
    NoAlignPositives,

    #[error("no trainable examples for the enabled losses")]
    NoTrainExamples,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("retrieval: k={k} exceeds catalog size {v}")]
    KTooLarge { k: usize, v: usize },

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
