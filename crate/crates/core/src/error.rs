use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} frames for the layout, got {got}")]
    FrameCountMismatch { expected: usize, got: usize },

    #[error("frame {index} has shape {got:?}, expected {expected:?}")]
    FrameShapeMismatch {
        index: usize,
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cell ({row}, {col}) is outside a {rows}x{cols} layout")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("time {0} is outside the allowed range")]
    TOutOfRange(f64),

    #[error("directional differences need at least two cells")]
    SingleCellLayout,

    #[error("loss weight alpha must be nonnegative, got {0}")]
    NegativeAlpha(f64),

    #[error("step must be nonnegative, got {0}")]
    NegativeStep(i64),

    #[error("step {step} is beyond the {total}-step plan")]
    StepBeyondPlan { step: u64, total: u64 },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: base={base}, flow={flow}")]
    NonFiniteLoss { step: u64, base: f64, flow: f64 },

    #[error("sampler state became non-finite at t={0}")]
    NonFiniteState(f64),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("missing reference: {0}")]
    MissingReference(String),

    #[error("layout too small: {0}")]
    LayoutTooSmall(String),

    #[error("{dir}: expected {expected} images, found {found} ({} short)", expected.saturating_sub(*found))]
    CountMismatch {
        dir: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        path: PathBuf,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("{path}: unreadable image: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("attention row sums to {sum}, not 1")]
    UnnormalizedRecord { sum: f64 },

    #[error("dataset '{0}' has no samples")]
    DatasetExhausted(String),

    #[error("checkpoint {path}: {reason}")]
    CheckpointIo { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            NonFiniteLoss { .. } | NonFiniteState(_) | UnnormalizedRecord { .. } => {
                ErrorClass::Numerical
            }
            TOutOfRange(_)
            | NegativeAlpha(_)
            | NegativeStep(_)
            | StepBeyondPlan { .. }
            | InvalidLayout(_)
            | InvalidConfig(_)
            | InvalidSpec(_)
            | Config(_)
            | GeometryMismatch(_)
            | MissingReference(_)
            | LayoutTooSmall(_)
            | IndexOutOfRange { .. }
            | SingleCellLayout => ErrorClass::Config,
            FrameCountMismatch { .. }
            | FrameShapeMismatch { .. }
            | ShapeMismatch(_)
            | CountMismatch { .. }
            | SizeMismatch { .. }
            | UnreadableImage { .. }
            | DatasetExhausted(_)
            | CheckpointIo { .. }
            | Io { .. } => ErrorClass::Data,
        }
    }
}
