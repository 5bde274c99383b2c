use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum MdeError {
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alignment index out of range: {0}")]
    AlignmentOutOfRange(String),
    #[error("implicit segmentation for token {0} is identically zero")]
    DegenerateSegmentation(usize),
    #[error("mask has no set pixel")]
    EmptyMask,
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("null-text optimization diverged at step {step}: distance {distance} vs start {start}")]
    DivergedOptimization { step: usize, distance: f64, start: f64 },
    #[error("non-finite gradient at timestep {timestep} (iteration {iter})")]
    NonFiniteGradient { timestep: usize, iter: usize },
    #[error("no classifier available: {0}")]
    MissingClassifier(String),
    #[error("no feature extractor available")]
    MissingExtractor,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Tape(#[from] mde_autograd::Error),
}

pub type Result<T> = std::result::Result<T, MdeError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MdeError {
    let path = path.into();
    move |source| MdeError::Io { path, source }
}
