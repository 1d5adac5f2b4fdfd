use std::path::PathBuf;

/// Errors raised by the pruning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(
        "size mismatch for tensor '{name}': header implies {expected} bytes, offsets span {actual}"
    )]
    SizeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("invalid tensor name {0:?}")]
    InvalidName(String),

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("shape mismatch for '{name}': {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("unknown modality '{modality}' for layer '{layer}'")]
    UnknownModality { layer: String, modality: String },

    #[error("tie shape conflict in group '{0}'")]
    TieShapeConflict(String),

    #[error("tie modality conflict in group '{0}'")]
    TieModalityConflict(String),

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no calibration data: {0}")]
    NoCalibrationData(String),

    #[error("degenerate layer '{0}': all weights are zero")]
    DegenerateLayer(String),

    #[error("layer too large for brute-force scoring: {0} parameters")]
    TooLarge(usize),

    #[error("k = {k} exceeds length {len}")]
    KTooLarge { k: usize, len: usize },

    #[error("criterion mismatch: expected {expected}, found {found} on '{layer}'")]
    CriterionMismatch {
        expected: String,
        found: String,
        layer: String,
    },

    #[error("layer set mismatch: {0}")]
    LayerMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {0}")]
    Diverged(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure came from reading or decoding files rather than
    /// from a semantic validation check.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::SizeMismatch { .. }
                | Error::Truncated(_)
                | Error::InvalidName(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
