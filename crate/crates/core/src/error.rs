use thiserror::Error;

pub type Result<T> = std::result::Result<T, CfdrError>;

#[derive(Debug, Error)]
pub enum CfdrError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward error: {0}")]
    Backward(String),

    #[error("optimizer error: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` is not quantized")]
    NotQuantized(String),

    #[error("index out of range: {what} = {value} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("checkpoint: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },

    #[error("checkpoint: malformed header: {0}")]
    BadHeader(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CfdrError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CfdrError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            CfdrError::Data(_)
                | CfdrError::Io { .. }
                | CfdrError::BadMagic { .. }
                | CfdrError::VersionMismatch { .. }
                | CfdrError::Truncated { .. }
                | CfdrError::BadHeader(_)
                | CfdrError::Json(_)
        )
    }
}
