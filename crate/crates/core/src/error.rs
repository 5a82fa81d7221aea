use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("zero-norm vector (norm {norm:e}) in {op}")]
    ZeroNormVector { op: &'static str, norm: f64 },

    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),

    #[error("degenerate alignment weights: sum {0:e} below 1e-9")]
    DegenerateWeights(f64),

    #[error("no token fired and the tail policy discarded the residual")]
    EmptyOutput,

    #[error("fired {fired} tokens but the teacher-forced target was {target}")]
    FiringCountMismatch { fired: usize, target: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("non-finite loss component `{0}`")]
    NonFiniteComponent(&'static str),

    #[error("input has {frames} frames, at least {min} required")]
    TooShortInput { frames: usize, min: usize },

    #[error("depth {depth} outside [0, {max}]")]
    DepthOutOfRange { depth: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path} (record {index}): {reason}")]
    CorruptFile {
        path: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),

    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("loss diverged at step {step}: total = {value}")]
    DivergedLoss { step: usize, value: f64 },

    #[error("predicted {pred} boundaries but gold has {gold}")]
    CountMismatch { pred: usize, gold: usize },

    #[error("no boundary errors to score")]
    EmptyErrors,

    #[error("heatmap is {rows}x{cols}, a square matrix is required")]
    NonSquare { rows: usize, cols: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("gradient check `{name}` failed: relative error {error:e}")]
    GradientMismatch { name: String, error: f64 },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the module that raises this error, used to qualify CLI messages.
    pub fn module(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::NonFiniteValue(_) => "diffcore",
            Error::ZeroNormVector { .. } | Error::GradientMismatch { .. } => "diffcore",
            Error::DegenerateWeights(_)
            | Error::EmptyOutput
            | Error::FiringCountMismatch { .. } => "cif",
            Error::NonPositiveTemperature(_) | Error::NonFiniteComponent(_) => "losses",
            Error::IdOutOfRange { .. }
            | Error::TooShortInput { .. }
            | Error::DepthOutOfRange { .. }
            | Error::DimensionMismatch(_) => "models",
            Error::Io { .. } | Error::CorruptFile { .. } | Error::BadFractions(_) => "synthdata",
            Error::StepOutOfRange { .. } | Error::DivergedLoss { .. } => "train",
            Error::CountMismatch { .. }
            | Error::EmptyErrors
            | Error::NonSquare { .. }
            | Error::DegenerateData(_) => "evalmetrics",
            Error::Config(_) => "cli",
        }
    }
}
