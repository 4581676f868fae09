use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum FsacError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: Option<String>,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("zero-norm vector at row {0}")]
    ZeroNorm(usize),

    #[error("invalid value for `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("no clusters")]
    NoClusters,

    #[error("target out of range: {0}")]
    TargetOutOfRange(String),

    #[error("no sample carries a ground-truth identity")]
    MissingTruth,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in {0} term")]
    NonFiniteGradient(&'static str),

    #[error("missing soft label for sample `{0}`")]
    MissingSoftLabel(String),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("no relevant gallery item for query `{0}`")]
    NoRelevant(String),

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("epoch {epoch}: clustering produced no clusters ({part})")]
    EpochWithoutClusters { epoch: usize, part: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl FsacError {
    pub(crate) fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        FsacError::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FsacError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while a stage was running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FsacError::InvalidConfig { .. }
                | FsacError::TargetOutOfRange(_)
                | FsacError::Parse { .. }
                | FsacError::DuplicateId(_)
                | FsacError::EmptyDataset
                | FsacError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FsacError>;
