use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WbError {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: spatial dims {height}x{width} must be multiples of {multiple}")]
    NotMultiple {
        op: &'static str,
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown decoder `{0}`")]
    UnknownDecoder(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at iteration {iteration} (lr {lr:e}, per-decoder losses {per_decoder:?})"
    )]
    NonFiniteLoss {
        iteration: usize,
        lr: f64,
        per_decoder: Vec<(String, f64)>,
    },

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("missing ground truth for setting {0}")]
    MissingGroundTruth(String),

    #[error("bad model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl WbError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        WbError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WbError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that stem from arithmetic rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            WbError::NonFiniteGradient { .. } | WbError::NonFiniteLoss { .. } | WbError::NonFinite(_)
        )
    }

    /// True for model/data file and codec failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            WbError::Io { .. } | WbError::Image(_) | WbError::Json(_) | WbError::ModelFormat(_)
        )
    }
}
