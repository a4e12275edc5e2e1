use thiserror::Error;

/// Errors from the tensor/differentiation core.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("nonpositive running variance {value} in channel {channel}")]
    NonPositiveVariance { channel: usize, value: f64 },
    #[error("non-finite value encountered at parameter index {index}")]
    NonFinite { index: usize },
}

/// Errors from data handling, training, and evaluation.
#[derive(Debug, Error)]
pub enum PixproError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: String, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image {width}x{height} smaller than minimum crop {min_side}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min_side: usize,
    },
    #[error("non-finite loss at step {step} (batch indices {indices:?})")]
    NonFiniteLoss { step: u64, indices: Vec<usize> },
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("eval error: {0}")]
    Eval(String),
}

impl PixproError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PixproError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Path-flavored shorthand for wrapping `std::io::Error`.
pub fn io(path: &std::path::Path, source: std::io::Error) -> PixproError {
    PixproError::io(path.display().to_string(), source)
}
