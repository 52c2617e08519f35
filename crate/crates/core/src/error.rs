use std::path::PathBuf;

/// Every failure the library can report. Variant names double as the error
/// case printed by the command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("DegenerateFeature: row {row} has norm {norm:e}")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("InvalidTemperature: {0} (must be > 0)")]
    InvalidTemperature(f64),

    #[error("EmptyMask: {0}")]
    EmptyMask(&'static str),

    #[error("DimensionMismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("InvalidAssignment: {0}")]
    InvalidAssignment(String),

    #[error("IndexOutOfRange: index {index} with {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("SelfLoop: edge ({0}, {0})")]
    SelfLoop(usize),

    #[error("LengthMismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("BoxOutOfRange: box {row0},{col0},{rows},{cols} outside {height}x{width} grid")]
    BoxOutOfRange {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
        height: usize,
        width: usize,
    },

    #[error("MalformedRle: {0}")]
    MalformedRle(String),

    #[error("BadMagic: {0:?}")]
    BadMagic([u8; 4]),

    #[error("UnsupportedVersion: {0}")]
    UnsupportedVersion(u32),

    #[error("UnsupportedDtype: {0}")]
    UnsupportedDtype(u32),

    #[error("TruncatedPayload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("IoFailure: {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("MalformedJson: {0}")]
    MalformedJson(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("InvalidParams: {0}")]
    InvalidParams(String),

    #[error("GridMismatch: {0}")]
    GridMismatch(String),

    #[error("NotNormalized: feature map rows must be unit L2 norm")]
    NotNormalized,

    #[error("MissingFeatures: graph at level {0} has no feature rows")]
    MissingFeatures(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
