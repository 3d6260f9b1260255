use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} is invalid for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("convolution kernels must have odd extents, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },
    #[error("power with non-integer exponent {exponent} needs positive inputs")]
    NonPositiveBase { exponent: f64 },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("gradient check needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("image must be {expected}x{expected}, got {height}x{width}")]
    BadImageSize {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    HeadMismatch { dim: usize, heads: usize },
    #[error("{tokens} tokens do not form a {grid}x{grid} grid plus class token")]
    GridMismatch { tokens: usize, grid: usize },
    #[error("grid {0} is too small for a 3x3 pyramid split")]
    GridTooSmall(usize),
    #[error("GeM pooling over an empty region")]
    EmptyRegion,
    #[error("regional sequences have unequal lengths")]
    RaggedSequences,
    #[error("cannot L2-normalize a zero descriptor")]
    ZeroVector,
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cosine similarity needs unit-norm rows (row {row} has norm {norm})")]
    NonUnitRows { row: usize, norm: f64 },
    #[error("need {needed} places with at least {per_place} images, dataset has {available}")]
    InsufficientPlaces {
        needed: usize,
        per_place: usize,
        available: usize,
    },

    #[error("PCA needs more samples than output dims ({samples} <= {out_dim})")]
    TooFewSamples { samples: usize, out_dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("image id {0} has no manifest record")]
    MissingMetadata(String),
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("descriptor index is empty")]
    EmptyIndex,
    #[error("unknown ground-truth rule {0:?}")]
    UnknownRule(String),
    #[error("no ranking for query {0}")]
    MissingQuery(usize),

    #[error("canvas {canvas} is too small for crop {crop} with viewpoint jitter (need {needed})")]
    CanvasTooSmall {
        canvas: usize,
        crop: usize,
        needed: usize,
    },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
