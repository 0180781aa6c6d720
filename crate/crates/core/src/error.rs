use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("header is not ASCII text at byte {offset}")]
    Encoding { offset: usize },

    #[error("cannot decode raster: {0}")]
    Decode(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("need at least 2 classes to split, got {0}")]
    InsufficientClasses(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cosine similarity undefined for a zero feature vector")]
    UndefinedSimilarity,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("linear system is singular; use a ridge penalty lambda > 0")]
    Singular,

    #[error("training diverged at step {step}: {detail}")]
    DivergedTraining { step: usize, detail: String },

    #[error("inner loop diverged at step {step}: non-finite gradient")]
    DivergedInnerLoop { step: usize },

    #[error("outer loop diverged: non-finite meta-gradient")]
    DivergedOuterLoop,

    #[error("method `{name}` is reserved but not implemented; implemented methods: {implemented}")]
    UnavailableMethod { name: String, implemented: String },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("episode rejected: {0}")]
    InvalidEpisode(String),

    #[error("report layout error: {0}")]
    Layout(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
