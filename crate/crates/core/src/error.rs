use thiserror::Error;

/// Errors raised by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{key}`")]
    UnknownKey { kind: &'static str, key: String },

    #[error("no eligible corruption for query ({h}, {r}): every entity is a known tail")]
    NoEligibleCorruption { h: u32, r: u32 },

    #[error("insufficient negatives for query ({h}, {r}): need {need}, have {have}")]
    InsufficientNegatives { h: u32, r: u32, need: usize, have: usize },

    #[error("empty ground-truth tail set for query ({h}, {r})")]
    EmptyGroundTruth { h: u32, r: u32 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("too few samples: N={n} requires N > k + 1 with k={k}")]
    TooFewSamples { n: usize, k: usize },

    #[error("unresolved template placeholder `{{{0}}}`")]
    UnresolvedPlaceholder(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("representation provider failed on triple {key}: {msg}")]
    Provider { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
