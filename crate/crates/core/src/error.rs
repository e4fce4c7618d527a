use thiserror::Error;

/// Errors raised by the autograd tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} holds {expected} elements but data has {actual}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("backward called on an empty tape (no forward pass recorded)")]
    NotRecorded,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Errors raised by the model, saliency, arbiter, engine and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("mask length {actual} does not match parameter group of {expected} entries ({group})")]
    MaskLength {
        group: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("missing target for task `{0}`")]
    MissingTarget(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("saliency needs at least one batch")]
    EmptyBatches,
    #[error("all saliency gradients are zero for task `{task}`; normalization undefined")]
    ZeroSaliency { task: String },
    #[error("gamma {gamma} out of range for {len} scores")]
    GammaOutOfRange { gamma: usize, len: usize },
    #[error("arbiter: {0}")]
    Arbiter(String),
    #[error("mask layout: {0}")]
    Layout(String),
    #[error("sparsity {0} outside (0, 1)")]
    Sparsity(f64),
    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),
    #[error("incompatible runs: {0}")]
    Incompatible(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Sparsity(_)
                | Error::Parse { .. }
                | Error::UnknownTask(_)
                | Error::Incompatible(_)
                | Error::Checkpoint(_)
        )
    }
}
