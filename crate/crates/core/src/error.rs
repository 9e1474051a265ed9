use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every module of the crate.
///
/// Variants are grouped by the class of failure so that callers (the CLI in
/// particular) can map them onto exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad magic: expected \"SGLR\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated input while reading {what}")]
    Truncated { what: String },

    #[error("non-finite value in tensor {tensor}")]
    NonFinite { tensor: String },

    #[error("unsupported dtype code {0}")]
    DType(u8),

    #[error("{path}: malformed JSON on line {line}: {message}")]
    EmbeddingParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate task id {task_id:?} on line {line}")]
    DuplicateTask {
        path: PathBuf,
        line: usize,
        task_id: String,
    },

    #[error("{path}: embedding dimension {found} on line {line} differs from {expected}")]
    EmbeddingDim {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("zero-norm embedding for {0}")]
    ZeroVector(String),

    #[error("degenerate mean embedding (norm {0:e})")]
    DegenerateMean(f64),

    #[error("missing blob {0}")]
    MissingBlob(PathBuf),

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("oracle training diverged on {task_id} at epoch {epoch} (loss {loss:e})")]
    Divergence { task_id: String, epoch: usize, loss: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
