use thiserror::Error;

pub type Result<T, E = PtqError> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum PtqError {
    // archive format
    #[error("bad magic {0:?}, expected \"PTQT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("tensors {first:?} and {second:?} have overlapping data extents")]
    OverlappingExtents { first: String, second: String },
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(String),
    #[error("unknown dtype tag {tag} for tensor {name:?}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}: names must be non-empty and at most 65535 bytes")]
    InvalidName(String),
    #[error("tensor {0:?}: dimension product overflows 64 bits")]
    ShapeOverflow(String),
    #[error("tensor {name:?}: shape implies {expected} elements but data holds {actual}")]
    ElementCount {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {0:?} not found")]
    NotFound(String),

    // numerical preconditions
    #[error("bit width {0} outside the supported range 2..=8")]
    BitsOutOfRange(u32),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("objective has no sign change on [{lo}, {hi}] (f(lo)={f_lo}, f(hi)={f_hi})")]
    NoSignChange {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },
    #[error("split map inconsistent with tensor: {0}")]
    InconsistentSplitMap(String),
    #[error("missing weight bit width for quantized layer {0:?}")]
    MissingBits(String),
    #[error("insufficient sweep coverage: {0}")]
    InsufficientCoverage(String),

    #[error("metadata: {0}")]
    Metadata(String),
    #[error("tensor {name:?}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: Box<PtqError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PtqError {
    pub(crate) fn in_tensor(self, name: &str) -> Self {
        match self {
            e @ PtqError::Tensor { .. } => e,
            e => PtqError::Tensor {
                name: name.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping tensor-name annotations.
    pub fn root(&self) -> &PtqError {
        match self {
            PtqError::Tensor { source, .. } => source.root(),
            e => e,
        }
    }
}
