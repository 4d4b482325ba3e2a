use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line front end to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch on {axis} axis: expected {expected}, got {actual}")]
    Shape {
        axis: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid layer index {index} (scene has {count} layers)")]
    InvalidLayer { index: usize, count: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing artifact: {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("invalid data in {}: {reason}", path.display())]
    InvalidData { path: PathBuf, reason: String },

    #[error("frames have inconsistent sizes: {files:?}")]
    InconsistentFrames { files: Vec<PathBuf> },

    #[error("insufficient frames: need at least {needed}, found {found}")]
    InsufficientFrames { needed: usize, found: usize },

    #[error("scene {scene}: {source}")]
    Scene {
        scene: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("frozen model weights changed during training")]
    FrozenWeightsMutated,

    #[error("evaluation reports do not share a split: {0}")]
    MismatchedSplits(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::MissingArtifact { .. }
            | Error::InvalidData { .. }
            | Error::InconsistentFrames { .. }
            | Error::InsufficientFrames { .. }
            | Error::MismatchedSplits(_)
            | Error::Json { .. }
            | Error::Image { .. } => ErrorKind::Data,
            Error::Scene { source, .. } => source.kind(),
            _ => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(axis: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            axis,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
