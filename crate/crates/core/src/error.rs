use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dataset kind {0:?}")]
    UnknownKind(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-length axis in coordinate grid")]
    ZeroLengthAxis,
    #[error("likelihood sigma must be > 0, got {0}")]
    InvalidSigma(f64),
    #[error("latent size {h}x{w} is not divisible by patch size {patch}")]
    IndivisibleDims { h: usize, w: usize, patch: usize },
    #[error("degenerate norm in weight reconstruction (layer {layer}, column {column})")]
    DegenerateNorm { layer: usize, column: usize },
    #[error("resolution mismatch: expected {expected:?}, found {found:?}")]
    ResolutionMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid sampler settings: {0}")]
    InvalidSampler(String),
    #[error("stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },
    #[error("incomplete checkpoint: missing {0}")]
    IncompleteCheckpoint(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("mask hides every point; nothing to condition on")]
    EmptyContext,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable machine-readable identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadMagic { .. } => "bad-magic",
            Error::Truncated { .. } => "truncated",
            Error::UnknownDtype(_) => "unknown-dtype",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::InvalidTensor(_) => "invalid-tensor",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::UnsupportedMaxval(_) => "unsupported-maxval",
            Error::MalformedHeader(_) => "malformed-header",
            Error::UnknownKind(_) => "unknown-kind",
            Error::InvalidConfig(_) => "invalid-config",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::ZeroLengthAxis => "zero-length-axis",
            Error::InvalidSigma(_) => "invalid-sigma",
            Error::IndivisibleDims { .. } => "indivisible-dims",
            Error::DegenerateNorm { .. } => "degenerate-norm",
            Error::ResolutionMismatch { .. } => "resolution-mismatch",
            Error::TimestepOutOfRange { .. } => "timestep-out-of-range",
            Error::InvalidSchedule(_) => "invalid-schedule",
            Error::InvalidSampler(_) => "invalid-sampler",
            Error::StageMismatch { .. } => "stage-mismatch",
            Error::IncompleteCheckpoint(_) => "incomplete-checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::EmptyContext => "empty-context",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
