use std::path::PathBuf;

use thiserror::Error;

use crate::tensorio::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("target-size mismatch: model `{model}` has {found} target rows, expected {expected}")]
    TargetSizeMismatch {
        model: String,
        expected: usize,
        found: usize,
    },

    #[error("class-count mismatch: model `{model}` has {found} classes, expected {expected}")]
    ClassCountMismatch {
        model: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate model id `{0}`")]
    DuplicateModelId(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("all-zero feature row {row} cannot be normalized")]
    ZeroFeatureRow { row: usize },

    #[error("no transferable model: every candidate was rejected by the dispersity floor")]
    NoTransferableModel,

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("non-finite loss term {term} at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Manifest(_) => "manifest",
            Error::Json { .. } => "json",
            Error::MissingFile(_) => "missing-file",
            Error::TargetSizeMismatch { .. } => "target-size-mismatch",
            Error::ClassCountMismatch { .. } => "class-count-mismatch",
            Error::DuplicateModelId(_) => "duplicate-model-id",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid-input",
            Error::NonFinite(_) => "non-finite",
            Error::ZeroFeatureRow { .. } => "zero-feature-row",
            Error::NoTransferableModel => "no-transferable-model",
            Error::EmptyEnsemble => "empty-ensemble",
            Error::Degenerate(_) => "degenerate",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
