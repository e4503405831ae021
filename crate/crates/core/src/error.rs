//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected contract) disagree on shape.
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    /// A hyper-parameter or layer configuration is invalid (stride does not
    /// divide, pooling on odd extents, network too deep for its input, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Mathematical domain violation (log of a non-positive value, empty
    /// reduction axis, probability outside [0, 1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input is degenerate for the requested operation (zero-variance patch,
    /// empty template set, single-class ROC input, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    /// Model file does not start with the expected magic bytes.
    #[error("model file magic mismatch: expected \"FLSN\", found {found:?}")]
    ModelMagic { found: [u8; 4] },

    /// Model file carries an unsupported format version.
    #[error("model file version mismatch: expected {expected}, found {found}")]
    ModelVersion { expected: u16, found: u16 },

    /// Model file ended before all declared chunks were read.
    #[error("model file truncated: {0}")]
    ModelTruncated(String),

    /// A dataset annotation line failed to parse.
    #[error("annotations line {line}: {message}")]
    JsonlLine { line: usize, message: String },

    /// A dataset file referenced by the annotations is missing.
    #[error("missing dataset file: {0}")]
    MissingFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(left: &[usize], right: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: context.into(),
        }
    }
}
