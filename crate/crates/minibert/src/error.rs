use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The CLI maps variants onto exit-code categories:
/// config errors exit 2, data errors exit 3, numeric aborts exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax: row {row} is entirely masked (all -inf); at least one position must be unmasked")]
    DegenerateSoftmax { row: usize },

    #[error("cross_entropy: every target row is ignored, mean is undefined")]
    AllTargetsIgnored,

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("config mismatch between checkpoint and request: differing fields {fields:?}")]
    ConfigMismatch { fields: Vec<String> },

    #[error("checkpoint: bad magic bytes, not a checkpoint file")]
    CheckpointMagic,

    #[error("checkpoint: format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: file truncated while reading {reading}")]
    CheckpointTruncated { reading: String },

    #[error("checkpoint: tensor {name} has shape {found:?}, expected {expected:?} from embedded config")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Exit-code category used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch { .. } => 2,
            Error::Data(_) | Error::Vocab(_) | Error::Io(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }

    /// Short machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::ConfigMismatch { .. } => "config",
            Error::Data(_) | Error::Vocab(_) | Error::Io(_) => "data",
            Error::NonFinite { .. } => "numeric",
            _ => "internal",
        }
    }
}
