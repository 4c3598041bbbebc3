use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by origin: shape/config validation, grouping,
/// data files, and numerical failures during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label matrix invalid: {0}")]
    InvalidLabels(String),

    #[error("cannot form {requested} groups from {classes} classes")]
    TooManyGroups { requested: usize, classes: usize },

    #[error("class {class} is not in group {group} of the {mode} partition")]
    ClassGroupMismatch {
        class: usize,
        group: usize,
        mode: &'static str,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("mean average precision undefined: no class has a positive example")]
    NoPositives,

    #[error("dataset file {path}: {reason}")]
    DataFormat { path: String, reason: String },

    #[error("blob truncated at byte offset {offset} in {path}")]
    TruncatedBlob { path: String, offset: u64 },

    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that indicate a numerical failure (as opposed to bad
    /// input or I/O); the CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NoPositives)
    }
}
