//! Evaluation metrics reports, serialized as JSON with the same column
//! structure as the result tables: camera counts, input outlier
//! fraction, registered count, rotation/translation errors (mean and
//! median).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::PoseErrors;

/// Mean/median rotation (degrees) and translation (aligned scene units)
/// errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorSummary {
    pub rot_mean_deg: f64,
    pub rot_median_deg: f64,
    pub trans_mean: f64,
    pub trans_median: f64,
}

impl From<&PoseErrors> for PoseErrorSummary {
    fn from(e: &PoseErrors) -> Self {
        PoseErrorSummary {
            rot_mean_deg: e.mean_rotation_deg,
            rot_median_deg: e.median_rotation_deg,
            trans_mean: e.mean_translation,
            trans_median: e.median_translation,
        }
    }
}

/// Pose accuracy report produced by `eval`. Deterministic for a given
/// input (no timing fields), so identical runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total cameras in the scene (N_c).
    pub n_c: usize,
    /// Input outlier fraction, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outliers_pct: Option<f64>,
    /// Cameras used in the reconstruction (N_r).
    pub n_r: usize,
    #[serde(flatten)]
    pub errors: PoseErrorSummary,
}

impl EvalReport {
    pub fn new(n_c: usize, n_r: usize, errors: &PoseErrors, outliers_pct: Option<f64>) -> Self {
        EvalReport { n_c, outliers_pct, n_r, errors: errors.into() }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::SfmError::NumericalFailure(format!("JSON encoding: {e}")))
    }
}

/// Bundle-adjustment pipeline report: camera counts, pose errors when
/// ground truth was supplied, reprojection quality, and runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub n_c: usize,
    pub n_r: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub errors: Option<PoseErrorSummary>,
    pub mean_reprojection_px: f64,
    pub runtime_sec: f64,
}

impl BaReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| crate::error::SfmError::NumericalFailure(format!("JSON encoding: {e}")))
    }
}
