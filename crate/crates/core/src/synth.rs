//! Deterministic synthetic scenes for desk-scale verification.
//!
//! Cameras sit on a jittered ring looking at the origin, points fill a
//! unit box, visibility is sampled per cell, Gaussian pixel noise is
//! added, and a fixed fraction of observations is replaced by uniform
//! in-image positions and labeled as outliers. Everything is driven by a
//! ChaCha8 stream seeded from the config, so identical configs produce
//! bit-identical scenes on every platform.

use nalgebra::{Matrix3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::equinet::OutlierScores;
use crate::error::{Result, SfmError};
use crate::geometry::{self, CameraPose, Point3};
use crate::trackstore::{normalize_tracks, Observation, TrackLabels, TrackTensor, MIN_TRACK_VIEWS};

/// Synthetic scene parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub num_cameras: usize,
    pub num_points: usize,
    pub noise_sigma_px: f64,
    pub outlier_rate: f64,
    pub visibility_rate: f64,
    pub focal_px: f64,
    pub seed: u64,
    pub image_width_px: f64,
    pub image_height_px: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_cameras: 20,
            num_points: 100,
            noise_sigma_px: 1.0,
            outlier_rate: 0.2,
            visibility_rate: 0.75,
            focal_px: 1000.0,
            seed: 20,
            image_width_px: 1024.0,
            image_height_px: 768.0,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.num_cameras < 3 {
            return Err(SfmError::InvalidConfig(format!(
                "need at least 3 cameras, got {}",
                self.num_cameras
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(SfmError::InvalidConfig(format!("outlier rate {}", self.outlier_rate)));
        }
        if !(0.0 < self.visibility_rate && self.visibility_rate <= 1.0) {
            return Err(SfmError::InvalidConfig(format!("visibility rate {}", self.visibility_rate)));
        }
        if self.num_points == 0 || self.focal_px <= 0.0 || self.noise_sigma_px < 0.0 {
            return Err(SfmError::InvalidConfig("degenerate scene parameters".into()));
        }
        Ok(())
    }
}

/// A generated scene: ground truth, pixel-space tracks, and the labels
/// marking exactly the injected outliers.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub gt_poses: Vec<CameraPose>,
    pub gt_points: Vec<Point3>,
    pub intrinsics: Vec<Matrix3<f64>>,
    /// Pixel-unit track tensor (normalize with `intrinsics` before
    /// feeding the network).
    pub tracks: TrackTensor,
    pub labels: TrackLabels,
}

impl SyntheticScene {
    /// Tracks mapped into normalized camera coordinates.
    pub fn normalized_tracks(&self) -> Result<TrackTensor> {
        normalize_tracks(&self.tracks, &self.intrinsics)
    }

    pub fn outlier_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.labels.num_outliers() as f64 / self.labels.len() as f64
        }
    }
}

fn look_at_origin(center: Vector3<f64>) -> CameraPose {
    let z = (-center).normalize();
    let x = Vector3::new(0.0, 0.0, 1.0).cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    CameraPose::from_rt(r, -r * center)
}

/// Generate a scene. Camera centers ring the origin at radius ~4 with
/// seeded radial and height jitter (non-coplanar, non-collinear); points
/// are uniform in the unit box. Per-track visibility is redrawn until the
/// minimum view count is met, projections are exact before noise, and
/// `floor(outlier_rate * p)` observations (seeded shuffle) are replaced
/// by uniform in-image positions.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.num_cameras;
    let n = config.num_points;
    let (w, h) = (config.image_width_px, config.image_height_px);

    let gt_poses: Vec<CameraPose> = (0..m)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            let radius = 4.0 * (1.0 + rng.random_range(-0.08..0.08));
            let height = rng.random_range(-0.8..0.8);
            look_at_origin(Vector3::new(radius * angle.cos(), radius * angle.sin(), height))
        })
        .collect();
    let k = Matrix3::new(config.focal_px, 0.0, w / 2.0, 0.0, config.focal_px, h / 2.0, 0.0, 0.0, 1.0);
    let intrinsics = vec![k; m];

    let gt_points: Vec<Point3> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();

    // Visibility mask per track, redrawn until >= MIN_TRACK_VIEWS.
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for j in 0..n {
        let mut attempts = 0;
        let visible = loop {
            let visible: Vec<usize> =
                (0..m).filter(|_| rng.random_bool(config.visibility_rate)).collect();
            if visible.len() >= MIN_TRACK_VIEWS {
                break visible;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(SfmError::InvalidConfig(
                    "visibility rate admits no valid track".into(),
                ));
            }
        };
        for i in visible {
            cells.push((i, j));
        }
    }

    // Exact projections in pixel units, then Gaussian noise.
    let noise = if config.noise_sigma_px > 0.0 {
        Some(Normal::new(0.0, config.noise_sigma_px).expect("valid sigma"))
    } else {
        None
    };
    let mut entries: Vec<(Observation, bool)> = Vec::with_capacity(cells.len());
    for &(i, j) in &cells {
        let (pos, depth) = geometry::project(&gt_poses[i], &gt_points[j])?;
        if depth <= 0.0 {
            return Err(SfmError::NumericalFailure(format!(
                "generated point {j} behind camera {i}"
            )));
        }
        let mut px = [
            config.focal_px * pos[0] + w / 2.0,
            config.focal_px * pos[1] + h / 2.0,
        ];
        if let Some(noise) = &noise {
            px[0] += noise.sample(&mut rng);
            px[1] += noise.sample(&mut rng);
        }
        entries.push((Observation { camera: i, track: j, position: px }, false));
    }

    // Exact-count outlier injection via seeded shuffle.
    let p = entries.len();
    let num_outliers = (config.outlier_rate * p as f64).floor() as usize;
    let mut order: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for &idx in order.iter().take(num_outliers) {
        entries[idx].0.position = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
        entries[idx].1 = true;
    }

    // Keep labels aligned with the tensor's canonical observation order.
    entries.sort_by_key(|(o, _)| (o.camera, o.track));
    let observations: Vec<Observation> = entries.iter().map(|(o, _)| *o).collect();
    let labels: Vec<bool> = entries.iter().map(|(_, l)| *l).collect();

    let mut counts = vec![0usize; m];
    for o in &observations {
        counts[o.camera] += 1;
    }
    if let Some(cam) = counts.iter().position(|&c| c == 0) {
        return Err(SfmError::InvalidConfig(format!(
            "camera {cam} observes no track; raise visibility or point count"
        )));
    }

    let tracks = TrackTensor::new(m, n, observations, false, None)?;
    let labels = TrackLabels::new(&tracks, labels)?;
    Ok(SyntheticScene { config: *config, gt_poses, gt_points, intrinsics, tracks, labels })
}

/// Inlier/outlier classification quality at a removal threshold, plus the
/// outlier fraction remaining among the kept observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub inlier_recall: f64,
    pub outlier_recall: f64,
    pub outlier_precision: f64,
    pub outlier_f_score: f64,
    pub input_outlier_fraction: f64,
    pub residual_outlier_fraction: f64,
}

/// Compare predicted scores against labels: an observation is predicted
/// an outlier when its score is at or above `threshold`.
pub fn classification_report(
    labels: &TrackLabels,
    scores: &OutlierScores,
    threshold: f64,
) -> Result<ClassificationReport> {
    if labels.len() != scores.len() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} scores", labels.len()),
            got: format!("{}", scores.len()),
        });
    }
    let mut tp_out = 0usize; // predicted outlier, labeled outlier
    let mut fp_out = 0usize; // predicted outlier, labeled inlier
    let mut fn_out = 0usize; // kept, labeled outlier
    let mut tn_out = 0usize; // kept, labeled inlier
    for (i, &score) in scores.values().iter().enumerate() {
        let predicted_outlier = score >= threshold;
        match (predicted_outlier, labels.is_outlier(i)) {
            (true, true) => tp_out += 1,
            (true, false) => fp_out += 1,
            (false, true) => fn_out += 1,
            (false, false) => tn_out += 1,
        }
    }
    let total = (tp_out + fp_out + fn_out + tn_out) as f64;
    let actual_out = tp_out + fn_out;
    let actual_in = fp_out + tn_out;
    let pred_out = tp_out + fp_out;
    let kept = fn_out + tn_out;

    let outlier_recall =
        if actual_out == 0 { 1.0 } else { tp_out as f64 / actual_out as f64 };
    let inlier_recall = if actual_in == 0 { 1.0 } else { tn_out as f64 / actual_in as f64 };
    let outlier_precision = if pred_out == 0 {
        if actual_out == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp_out as f64 / pred_out as f64
    };
    let outlier_f_score = if outlier_precision + outlier_recall == 0.0 {
        0.0
    } else {
        2.0 * outlier_precision * outlier_recall / (outlier_precision + outlier_recall)
    };
    let input_outlier_fraction = if total == 0.0 { 0.0 } else { actual_out as f64 / total };
    let residual_outlier_fraction = if kept == 0 { 0.0 } else { fn_out as f64 / kept as f64 };
    Ok(ClassificationReport {
        inlier_recall,
        outlier_recall,
        outlier_precision,
        outlier_f_score,
        input_outlier_fraction,
        residual_outlier_fraction,
    })
}

/// Classification metrics of predicted scores on a generated scene.
pub fn scene_metrics(
    scene: &SyntheticScene,
    pred_scores: &OutlierScores,
    threshold: f64,
) -> Result<ClassificationReport> {
    classification_report(&scene.labels, pred_scores, threshold)
}
