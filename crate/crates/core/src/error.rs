use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("parameter name sets differ; missing: {missing:?}, unexpected: {unexpected:?}")]
    NameSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("`{name}` does not follow the layer{{l}}.{{weight|bias}} naming convention")]
    NamingConvention { name: String },

    #[error("layer index {index} missing from 1..={count}")]
    MissingLayer { index: usize, count: usize },

    #[error("degenerate sensitivity: every layer score is zero")]
    DegenerateSensitivity,

    #[error("degenerate alignment: every off-diagonal alignment score is zero")]
    DegenerateAlignment,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("truncated header: file has {len} bytes, need at least 8")]
    TruncatedHeader { len: usize },

    #[error("header length {declared} exceeds the {available} bytes after the length prefix")]
    HeaderTooLarge { declared: u64, available: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error(
        "tensor `{name}`: offsets [{begin}, {end}) overlap previous data ending at byte {prev_end}"
    )]
    OverlappingOffsets {
        name: String,
        begin: usize,
        end: usize,
        prev_end: usize,
    },

    #[error("gap in data section: bytes [{begin}, {end}) are not covered by any tensor")]
    GappedOffsets { begin: usize, end: usize },

    #[error("tensor `{name}`: offsets span {span} bytes, shape requires {expected}")]
    OffsetSizeMismatch {
        name: String,
        span: usize,
        expected: usize,
    },

    #[error("tensor `{name}`: offsets end at byte {end}, data section holds {len}")]
    TruncatedData {
        name: String,
        end: usize,
        len: usize,
    },

    #[error("tensor `{name}` too large for offset arithmetic")]
    TooLarge { name: String },

    #[error("dataset {path}: line {line}: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
