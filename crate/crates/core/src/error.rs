use thiserror::Error;

pub type Result<T> = std::result::Result<T, LcflError>;

#[derive(Debug, Error)]
pub enum LcflError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LcflError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LcflError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LcflError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
