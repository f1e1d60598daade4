//! Error type shared by all pipeline stages.

use thiserror::Error;

/// Errors produced by track handling, geometry, the network, and the solvers.
#[derive(Error, Debug)]
pub enum SfmError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("singular intrinsic matrix for camera {0}")]
    SingularIntrinsics(usize),

    #[error("track tensor is not in normalized camera coordinates")]
    NotNormalized,

    #[error("track tensor has no intrinsics; cannot convert to pixel units")]
    MissingIntrinsics,

    #[error("degenerate triangulation: {0}")]
    DegenerateTriangulation(String),

    #[error("projection undefined: depth is exactly zero")]
    ZeroDepth,

    #[error("similarity alignment needs >= 3 cameras with non-collinear centers: {0}")]
    DegenerateAlignment(String),

    #[error("camera {0} has no observations")]
    EmptyCamera(usize),

    #[error("track tensor has no observations")]
    EmptyTensor,

    #[error("loss is undefined over zero observations")]
    NoObservations,

    #[error("scene rejected: {0}")]
    SceneRejected(String),

    #[error("all points were removed by filtering")]
    AllPointsFiltered,

    #[error("view graph is empty")]
    EmptyViewGraph,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SfmError>;

impl SfmError {
    /// True for malformed or inconsistent input data (as opposed to
    /// numerical breakdown during a solve).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            SfmError::Parse { .. }
                | SfmError::Io(_)
                | SfmError::ShapeMismatch { .. }
                | SfmError::NotNormalized
                | SfmError::MissingIntrinsics
                | SfmError::InvalidConfig(_)
                | SfmError::EmptyTensor
        )
    }
}
