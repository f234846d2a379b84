use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("invalid token id {id} (vocab size {size})")]
    InvalidTokenId { id: u32, size: usize },
    #[error("positions are 1-based")]
    ZeroPosition,
    #[error("position {pos} out of range for a sequence of {len} tokens")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("empty document {0}")]
    EmptyDocument(u32),
    #[error("vocab mismatch: expected hash {expected:016x}, found {found:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("empty database")]
    EmptyDatabase,
    #[error("validation pairs absent from the retrieval database")]
    ValidationPairsAbsent,
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: u32, classes: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("neighbor batch misaligned: {0}")]
    NeighborMisaligned(String),
    #[error("document {doc_id} retrieved a neighbor from itself")]
    NeighborLeak { doc_id: u32 },
    #[error("retrieval database required but missing")]
    MissingDatabase,
    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
