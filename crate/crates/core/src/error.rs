use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("class id {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid coefficient {0}: must be finite and non-negative")]
    InvalidCoefficient(f32),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph already consumed by a backward pass; record a new forward pass first")]
    StaleGraph,

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("gradient check unreliable: {0}")]
    CheckUnreliable(String),

    #[error("{0}")]
    CheckFailed(String),

    #[error("model is frozen")]
    FrozenModel,

    #[error("a frozen classifier is required")]
    FrozenModelRequired,

    #[error("no eligible images to evaluate")]
    EmptyEvaluation,

    #[error("visualization bank has no entry for class {0}")]
    IncompleteBank(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("dataset assembly error: {0}")]
    DatasetAssembly(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
