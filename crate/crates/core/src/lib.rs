//! Outlier-robust multiview structure from motion.
//!
//! Takes a sparse point-track tensor (2D observations of unknown 3D points
//! across unknown cameras), classifies individual observations as inliers
//! or outliers with a permutation-equivariant network, regresses camera
//! poses and 3D structure, and refines the result with a robust bundle
//! adjustment post-process.
//!
//! The pipeline stages mirror the module layout:
//!
//! * [`trackstore`] — building, normalizing, labeling, filtering tracks
//! * [`geometry`] — camera model, triangulation, alignment, metrics
//! * [`autodiff`] — reverse-mode differentiation tape
//! * [`equinet`] — equivariant encoder and output heads
//! * [`losses`] — reprojection + classification objective
//! * [`training`] — multi-scene training, inference, fine-tuning
//! * [`robustba`] — robust bundle adjustment (Levenberg–Marquardt)
//! * [`synth`] — deterministic synthetic scene generator

pub mod autodiff;
pub mod equinet;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod parallel;
pub mod report;
pub mod robustba;
pub mod synth;
pub mod trackstore;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use equinet::{LatentFeatures, ModelConfig, ModelParams, OutlierScores};
pub use error::{Result, SfmError};
pub use geometry::{CameraPose, Point3, PoseErrors, SimilarityTransform};
pub use losses::{LossBreakdown, LossConfig};
pub use robustba::{BAProblem, RobustBAConfig, ViewGraph};
pub use synth::{SceneConfig, SyntheticScene};
pub use trackstore::{Observation, PairwiseMatches, TrackLabels, TrackTensor};
pub use training::TrainConfig;


