use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Shape and argument errors raised by the tensor engine.
#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported rank {rank}")]
    Rank { op: &'static str, rank: usize },
    #[error("shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for {bound} rows")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Argument(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("item `{0}` appears on more than one catalog line")]
    DuplicateItem(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("item `{0}` has an empty attribute set")]
    EmptyAttributeSet(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("invalid {kind} id {id}")]
    InvalidId { kind: &'static str, id: u32 },
    #[error("sequence of length {len} exceeds the maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence has no non-padding entries")]
    EmptySequence,
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no valid negative item remains after exclusions")]
    NoNegativeItem,
    #[error("every attribute belongs to the item; no substitute attribute exists")]
    NoNegativeAttribute,
    #[error("catalog has {items} items but evaluation needs at least {needed}")]
    CatalogTooSmall { items: usize, needed: usize },
    #[error("candidate list contains item {0} more than once")]
    DuplicateCandidate(u32),
    #[error("paired lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint holds component `{found}`, expected `{expected}`")]
    Component { expected: String, found: String },
    #[error("checkpoint parameters do not match the model: {0}")]
    ParamMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
