use std::path::PathBuf;

use crate::store::MapKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Backend,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 2,
            ErrorClass::Backend => 3,
            ErrorClass::Io => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("timestep {t} out of range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("word `{word}` occurs {count} times in `{prompt}`")]
    AmbiguousWord { word: String, prompt: String, count: usize },

    #[error("word `{word}` not found in `{prompt}`")]
    UnknownWord { word: String, prompt: String },

    #[error("prompts are misaligned: {0}")]
    Misaligned(String),

    #[error("invalid edit spec: {0}")]
    InvalidEditSpec(String),

    #[error("prompt has {len} tokens, context length is {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("attention map at layer {layer} ({kind}) is not row-stochastic: row sum {sum}")]
    NotStochastic { layer: usize, kind: MapKind, sum: f64 },

    #[error("incomplete attention store: {0}")]
    IncompleteStore(String),

    #[error("store mismatch: {0}")]
    StoreMismatch(String),

    #[error("stale cache {path}: {reason}")]
    StaleCache { path: PathBuf, reason: String },

    #[error("blending mask undefined: {0}")]
    MaskUndefined(String),

    #[error("resolution incompatibility: {0}")]
    Resolution(String),

    #[error("denoiser failed at timestep {t}: {source}")]
    Backend { t: usize, source: Box<Error> },

    #[error("controller failed at timestep {t}, layer {layer} ({kind}): {source}")]
    Controller { t: usize, layer: usize, kind: MapKind, source: Box<Error> },

    #[error("{0}")]
    BackendFailure(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) | Error::Image(_) | Error::Format(_) => ErrorClass::Io,
            Error::Backend { .. } | Error::Controller { .. } | Error::BackendFailure(_) => {
                ErrorClass::Backend
            }
            _ => ErrorClass::Validation,
        }
    }
}
