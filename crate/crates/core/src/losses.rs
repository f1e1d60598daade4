//! Training objective: classification cross-entropy plus a depth-hinged
//! reprojection term.
//!
//! The reprojection term averages, over the p observed cells, either the
//! Euclidean norm of the 2D residual (when the projected depth is at
//! least h) or the hinge `max(0, h - depth)` that pushes points back in
//! front of the camera. Both branches share the same 1/p normalization.
//! The total is `bce + alpha * reprojection`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::equinet::OutlierScores;
use crate::error::{Result, SfmError};
use crate::trackstore::{TrackLabels, TrackTensor};

/// Loss hyperparameters: the balance weight between the classification
/// and reprojection terms, and the depth hinge constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub hinge_h: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 10.0, hinge_h: 1e-4 }
    }
}

/// The loss components; `total = outlier_bce + alpha * reprojection`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub outlier_bce: f64,
    pub reprojection: f64,
}

impl LossBreakdown {
    pub fn compose(outlier_bce: f64, reprojection: f64, config: &LossConfig) -> Self {
        LossBreakdown { total: outlier_bce + config.alpha * reprojection, outlier_bce, reprojection }
    }
}

/// Column vector [p,1] slice helper.
fn col(tape: &mut Tape, a: Var, j: usize) -> Var {
    tape.slice_cols(a, j, 1)
}

/// Cross product columns: (a x b) for per-row 3-vectors given as three
/// [p,1] columns each.
fn cross(
    tape: &mut Tape,
    a: (Var, Var, Var),
    b: (Var, Var, Var),
) -> Result<(Var, Var, Var)> {
    let (ax, ay, az) = a;
    let (bx, by, bz) = b;
    let x1 = tape.mul(ay, bz)?;
    let x2 = tape.mul(az, by)?;
    let x = tape.sub(x1, x2)?;
    let y1 = tape.mul(az, bx)?;
    let y2 = tape.mul(ax, bz)?;
    let y = tape.sub(y1, y2)?;
    let z1 = tape.mul(ax, by)?;
    let z2 = tape.mul(ay, bx)?;
    let z = tape.sub(z1, z2)?;
    Ok((x, y, z))
}

/// Observation-aligned projection graph: rotates each observed track's
/// point by its camera's (normalized) quaternion, translates, and splits
/// into image coordinates and depth.
///
/// Returns `(u_x, u_y, depth)` as [p,1] nodes, where the perspective
/// division at cells in the hinge branch (depth below `hinge_h`) is
/// carried out against a constant 1 denominator: those image coordinates
/// are masked out of the loss, and this keeps the graph finite.
fn projection_graph(
    tape: &mut Tape,
    cameras: Var,
    points: Var,
    tracks: &TrackTensor,
    hinge_h: f64,
) -> Result<(Var, Var, Var, Vec<f64>)> {
    let cam_ids = tracks.camera_ids();
    let track_ids = tracks.track_ids();

    let t = tape.slice_cols(cameras, 0, 3);
    let q = tape.slice_cols(cameras, 3, 4);
    let q_sq = tape.square(q);
    let q_norm2 = tape.row_sum(q_sq);
    if tape.value(q_norm2).data().iter().any(|&v| v <= 0.0) {
        return Err(SfmError::NumericalFailure("zero quaternion in camera output".into()));
    }
    let q_norm = tape.sqrt(q_norm2);
    let q_hat = tape.div_col_broadcast(q, q_norm)?;

    let q_obs = tape.gather_rows(q_hat, &cam_ids);
    let t_obs = tape.gather_rows(t, &cam_ids);
    let x_obs = tape.gather_rows(points, &track_ids);

    let qw = col(tape, q_obs, 0);
    let qv = (col(tape, q_obs, 1), col(tape, q_obs, 2), col(tape, q_obs, 3));
    let v = (col(tape, x_obs, 0), col(tape, x_obs, 1), col(tape, x_obs, 2));

    // Rotate: v' = v + 2 w (qv x v) + 2 qv x (qv x v).
    let c1 = cross(tape, qv, v)?;
    let c2 = cross(tape, qv, c1)?;
    let rotate_axis = |tape: &mut Tape, vi: Var, c1i: Var, c2i: Var| -> Result<Var> {
        let wc1 = tape.mul(qw, c1i)?;
        let inner = tape.add(wc1, c2i)?;
        let scaled = tape.scale(inner, 2.0);
        tape.add(vi, scaled)
    };
    let rx = rotate_axis(tape, v.0, c1.0, c2.0)?;
    let ry = rotate_axis(tape, v.1, c1.1, c2.1)?;
    let rz = rotate_axis(tape, v.2, c1.2, c2.2)?;

    let yx = {
        let tx = col(tape, t_obs, 0);
        tape.add(rx, tx)?
    };
    let yy = {
        let ty = col(tape, t_obs, 1);
        tape.add(ry, ty)?
    };
    let depth = {
        let tz = col(tape, t_obs, 2);
        tape.add(rz, tz)?
    };

    // Branch selection is fixed at the forward values: 1 where the
    // residual branch applies (depth >= h), 0 where the hinge applies.
    let mask_r: Vec<f64> =
        tape.value(depth).data().iter().map(|&d| if d >= hinge_h { 1.0 } else { 0.0 }).collect();
    let p = mask_r.len();
    let mask_h: Vec<f64> = mask_r.iter().map(|&m| 1.0 - m).collect();
    let mask_r_const = tape.constant(Tensor::from_vec(p, 1, mask_r.clone()));
    let mask_h_const = tape.constant(Tensor::from_vec(p, 1, mask_h));

    let masked_depth = tape.mul(depth, mask_r_const)?;
    let denom = tape.add(masked_depth, mask_h_const)?;
    let ux = tape.div(yx, denom)?;
    let uy = tape.div(yy, denom)?;
    Ok((ux, uy, depth, mask_r))
}

/// Reprojection loss over a normalized track tensor, differentiable
/// through the raw camera 7-vectors ([m,7]) and points ([n,3]).
pub fn reprojection_loss_graph(
    tape: &mut Tape,
    cameras: Var,
    points: Var,
    tracks: &TrackTensor,
    config: &LossConfig,
) -> Result<Var> {
    let p = tracks.num_observations();
    if p == 0 {
        return Err(SfmError::NoObservations);
    }
    let (ux, uy, depth, mask_r) = projection_graph(tape, cameras, points, tracks, config.hinge_h)?;

    let obs_x: Vec<f64> = tracks.observations().iter().map(|o| o.position[0]).collect();
    let obs_y: Vec<f64> = tracks.observations().iter().map(|o| o.position[1]).collect();
    let ox = tape.constant(Tensor::from_vec(p, 1, obs_x));
    let oy = tape.constant(Tensor::from_vec(p, 1, obs_y));

    let dx = tape.sub(ox, ux)?;
    let dy = tape.sub(oy, uy)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let r2 = tape.add(dx2, dy2)?;
    let r_norm = tape.sqrt(r2);

    let hinge_arg = tape.affine(depth, -1.0, config.hinge_h);
    let hinge = tape.relu(hinge_arg);

    let mask_h: Vec<f64> = mask_r.iter().map(|&m| 1.0 - m).collect();
    let mask_r_const = tape.constant(Tensor::from_vec(p, 1, mask_r));
    let mask_h_const = tape.constant(Tensor::from_vec(p, 1, mask_h));
    let s_r = tape.mul(r_norm, mask_r_const)?;
    let s_h = tape.mul(hinge, mask_h_const)?;
    let s = tape.add(s_r, s_h)?;
    Ok(tape.mean_all(s))
}

/// Mean binary cross-entropy of outlier scores against labels
/// (1 = outlier), scores clamped to [1e-12, 1 - 1e-12].
pub fn outlier_bce_graph(tape: &mut Tape, scores: Var, labels: &TrackLabels) -> Result<Var> {
    tape.bce(scores, &labels.targets())
}

/// Tape nodes of the combined objective.
pub struct LossVars {
    pub total: Var,
    pub outlier_bce: Var,
    pub reprojection: Var,
}

/// `total = bce + alpha * reprojection`. Without labels (unsupervised
/// fine-tuning) the classification term degenerates to zero and the
/// total is the weighted reprojection loss alone.
pub fn total_loss_graph(
    tape: &mut Tape,
    scores: Var,
    cameras: Var,
    points: Var,
    tracks: &TrackTensor,
    labels: Option<&TrackLabels>,
    config: &LossConfig,
) -> Result<LossVars> {
    let reprojection = reprojection_loss_graph(tape, cameras, points, tracks, config)?;
    let outlier_bce = match labels {
        Some(l) => outlier_bce_graph(tape, scores, l)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let weighted = tape.scale(reprojection, config.alpha);
    let total = tape.add(outlier_bce, weighted)?;
    Ok(LossVars { total, outlier_bce, reprojection })
}

/// Value-level reprojection loss for raw head outputs.
pub fn reprojection_loss(
    cameras: &Tensor,
    points: &Tensor,
    tracks: &TrackTensor,
    config: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(cameras.clone());
    let x = tape.constant(points.clone());
    let loss = reprojection_loss_graph(&mut tape, c, x, tracks, config)?;
    Ok(tape.value(loss).item())
}

/// Value-level mean BCE of scores against labels.
pub fn outlier_bce_loss(scores: &OutlierScores, labels: &TrackLabels) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_vec(scores.len(), 1, scores.values().to_vec()));
    let loss = tape.bce(s, &labels.targets())?;
    Ok(tape.value(loss).item())
}

/// Value-level combined objective.
pub fn total_loss(
    scores: &OutlierScores,
    labels: &TrackLabels,
    cameras: &Tensor,
    points: &Tensor,
    tracks: &TrackTensor,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let bce = outlier_bce_loss(scores, labels)?;
    let reproj = reprojection_loss(cameras, points, tracks, config)?;
    Ok(LossBreakdown::compose(bce, reproj, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, CameraPose};
    use crate::trackstore::Observation;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Three cameras along x, one track, raw 7-vectors with identity
    /// rotations; positions taken as exact projections plus an offset.
    fn fixture(offsets: [[f64; 2]; 3], depth_override: Option<f64>) -> (Tensor, Tensor, TrackTensor) {
        let point = match depth_override {
            Some(z) => Vector3::new(0.0, 0.0, z),
            None => Vector3::new(0.1, -0.2, 2.0),
        };
        let mut cameras = Tensor::zeros(3, 7);
        let mut obs = Vec::new();
        for cam in 0..3 {
            let t = Vector3::new(0.3 * cam as f64, 0.0, 0.0);
            cameras.set(cam, 0, t.x);
            cameras.set(cam, 1, t.y);
            cameras.set(cam, 2, t.z);
            cameras.set(cam, 3, 1.0); // identity quaternion, unnormalized on purpose below
            let pose = CameraPose::new([1.0, 0.0, 0.0, 0.0], t).unwrap();
            let (proj, _) = geometry::project(&pose, &point).unwrap();
            obs.push(Observation {
                camera: cam,
                track: 0,
                position: [proj[0] + offsets[cam][0], proj[1] + offsets[cam][1]],
            });
        }
        let points = Tensor::from_vec(1, 3, vec![point.x, point.y, point.z]);
        let tracks = TrackTensor::new(3, 1, obs, true, None).unwrap();
        (cameras, points, tracks)
    }

    #[test]
    fn exact_reprojection_is_zero() {
        let (cameras, points, tracks) = fixture([[0.0, 0.0]; 3], None);
        let loss = reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn residual_three_four_gives_norm_five() {
        let (cameras, points, tracks) = fixture([[3.0, 4.0]; 3], None);
        let loss = reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
        assert!((loss - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mean_is_over_all_observations() {
        let (cameras, points, tracks) = fixture([[3.0, 4.0], [0.0, 0.0], [0.0, 0.0]], None);
        let loss = reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
        assert!((loss - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shallow_depth_takes_hinge_branch() {
        // Depth h/2: every observation contributes h - h/2 = 5e-5, no
        // matter how large the image-space residual would be.
        let h = LossConfig::default().hinge_h;
        let (cameras, points, tracks) = fixture([[100.0, 100.0]; 3], Some(h / 2.0));
        let loss = reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
        assert!((loss - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn hinge_branch_is_continuous_at_threshold() {
        let h = LossConfig::default().hinge_h;
        for eps in [1e-6, 1e-8, 1e-10] {
            let (cameras, points, tracks) = fixture([[0.0, 0.0]; 3], Some(h - eps));
            let loss =
                reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
            assert!((loss - eps).abs() < 1e-15, "hinge at h-{eps} gave {loss}");
        }
        // At exactly h the residual branch applies and the loss vanishes
        // for perfect projections.
        let (cameras, points, tracks) = fixture([[0.0, 0.0]; 3], Some(h));
        let loss = reprojection_loss(&cameras, &points, &tracks, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn bce_half_scores_is_ln_two() {
        let (_, _, tracks) = fixture([[0.0, 0.0]; 3], None);
        let scores = OutlierScores::new(&tracks, vec![0.5; 3]).unwrap();
        let labels = TrackLabels::new(&tracks, vec![true, false, false]).unwrap();
        let loss = outlier_bce_loss(&scores, &labels).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_wrong_score_on_inlier() {
        let (_, _, tracks) = fixture([[0.0, 0.0]; 3], None);
        let scores = OutlierScores::new(&tracks, vec![0.9, 0.9, 0.9]).unwrap();
        let labels = TrackLabels::new(&tracks, vec![false, false, false]).unwrap();
        let loss = outlier_bce_loss(&scores, &labels).unwrap();
        assert!((loss - (-(0.1f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn bce_approaches_zero_at_clamp_limit() {
        let (_, _, tracks) = fixture([[0.0, 0.0]; 3], None);
        let scores = OutlierScores::new(&tracks, vec![1.0, 0.0, 0.0]).unwrap();
        let labels = TrackLabels::new(&tracks, vec![true, false, false]).unwrap();
        let loss = outlier_bce_loss(&scores, &labels).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn breakdown_composition() {
        let config = LossConfig::default();
        let b = LossBreakdown::compose(0.2, 0.05, &config);
        assert!((b.total - 0.7).abs() < 1e-15);
        let z = LossBreakdown::compose(0.0, 0.0, &config);
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn total_equals_components() {
        let (cameras, points, tracks) = fixture([[0.01, -0.02]; 3], None);
        let scores = OutlierScores::new(&tracks, vec![0.3, 0.6, 0.2]).unwrap();
        let labels = TrackLabels::new(&tracks, vec![false, true, false]).unwrap();
        let config = LossConfig::default();
        let b = total_loss(&scores, &labels, &cameras, &points, &tracks, &config).unwrap();
        assert_eq!(b.total, b.outlier_bce + config.alpha * b.reprojection);
        assert!(b.total.is_finite() && b.total > 0.0);
    }

    /// Random scene: ring cameras as raw 7-vectors, box points, full
    /// visibility.
    fn random_scene(
        rng: &mut ChaCha8Rng,
        m: usize,
        n: usize,
    ) -> (Tensor, Tensor, TrackTensor, Vec<bool>) {
        let mut cameras = Tensor::zeros(m, 7);
        let poses: Vec<CameraPose> = (0..m)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
                let center =
                    Vector3::new(3.0 * angle.cos(), 3.0 * angle.sin(), 0.4 * (2.0 * angle).sin());
                let z = (-center).normalize();
                let x = Vector3::new(0.0, 0.0, 1.0).cross(&z).normalize();
                let y = z.cross(&x);
                let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
                CameraPose::from_rt(r, -r * center)
            })
            .collect();
        for (i, pose) in poses.iter().enumerate() {
            let t = pose.translation();
            let q = pose.quaternion();
            for (k, v) in [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].into_iter().enumerate() {
                cameras.set(i, k, v);
            }
        }
        let mut points = Tensor::zeros(n, 3);
        let mut obs = Vec::new();
        let mut labels = Vec::new();
        for j in 0..n {
            let p = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            points.set(j, 0, p.x);
            points.set(j, 1, p.y);
            points.set(j, 2, p.z);
            for (i, pose) in poses.iter().enumerate() {
                let (proj, _) = geometry::project(pose, &p).unwrap();
                let noise = [rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)];
                obs.push(Observation {
                    camera: i,
                    track: j,
                    position: [proj[0] + noise[0], proj[1] + noise[1]],
                });
                labels.push(rng.random_bool(0.2));
            }
        }
        let tracks = TrackTensor::new(m, n, obs, true, None).unwrap();
        (cameras, points, tracks, labels)
    }

    #[test]
    fn total_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let (cameras, points, tracks, label_bits) = random_scene(&mut rng, 5, 8);
        let labels = TrackLabels::new(&tracks, label_bits.clone()).unwrap();
        let score_vals: Vec<f64> =
            (0..tracks.num_observations()).map(|_| rng.random_range(0.05..0.95)).collect();
        let scores = OutlierScores::new(&tracks, score_vals.clone()).unwrap();
        let config = LossConfig::default();
        let base = total_loss(&scores, &labels, &cameras, &points, &tracks, &config).unwrap();

        // Permute cameras and tracks consistently.
        let cam_perm: Vec<usize> = vec![2, 0, 4, 1, 3];
        let track_perm: Vec<usize> = vec![5, 3, 7, 0, 2, 6, 1, 4];
        let perm_obs: Vec<Observation> = tracks
            .observations()
            .iter()
            .map(|o| Observation {
                camera: cam_perm[o.camera],
                track: track_perm[o.track],
                position: o.position,
            })
            .collect();
        let perm_tracks = TrackTensor::new(5, 8, perm_obs, true, None).unwrap();
        // Re-align scores and labels with the permuted tensor's order.
        let mut perm_scores = vec![0.0; score_vals.len()];
        let mut perm_labels = vec![false; label_bits.len()];
        for (i, o) in tracks.observations().iter().enumerate() {
            let j = perm_tracks.find(cam_perm[o.camera], track_perm[o.track]).unwrap();
            perm_scores[j] = score_vals[i];
            perm_labels[j] = label_bits[i];
        }
        let mut perm_cameras = Tensor::zeros(5, 7);
        for i in 0..5 {
            for c in 0..7 {
                perm_cameras.set(cam_perm[i], c, cameras.at(i, c));
            }
        }
        let mut perm_points = Tensor::zeros(8, 3);
        for j in 0..8 {
            for c in 0..3 {
                perm_points.set(track_perm[j], c, points.at(j, c));
            }
        }
        let scores2 = OutlierScores::new(&perm_tracks, perm_scores).unwrap();
        let labels2 = TrackLabels::new(&perm_tracks, perm_labels).unwrap();
        let permuted =
            total_loss(&scores2, &labels2, &perm_cameras, &perm_points, &perm_tracks, &config)
                .unwrap();
        assert!((base.total - permuted.total).abs() < 1e-12);
    }

    #[test]
    fn residual_branch_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (mut cameras, mut points, tracks, _) = random_scene(&mut rng, 5, 8);
        let config = LossConfig::default();
        let base = reprojection_loss(&cameras, &points, &tracks, &config).unwrap();
        // Scale all translations and points by s: depths scale by s and,
        // with every depth still at or above h, residuals are unchanged.
        let s = 7.5;
        for i in 0..cameras.rows() {
            for c in 0..3 {
                let v = cameras.at(i, c) * s;
                cameras.set(i, c, v);
            }
        }
        for j in 0..points.rows() {
            for c in 0..3 {
                let v = points.at(j, c) * s;
                points.set(j, c, v);
            }
        }
        let scaled = reprojection_loss(&cameras, &points, &tracks, &config).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::autodiff::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (cameras, points, tracks, label_bits) = random_scene(&mut rng, 4, 5);
        let labels = TrackLabels::new(&tracks, label_bits).unwrap();
        let config = LossConfig::default();
        let score_vals: Vec<f64> =
            (0..tracks.num_observations()).map(|_| rng.random_range(0.2..0.8)).collect();
        let scores_t = Tensor::from_vec(tracks.num_observations(), 1, score_vals);

        let err = grad_check(
            |tape, vars| {
                let loss = total_loss_graph(
                    tape,
                    vars[0],
                    vars[1],
                    vars[2],
                    &tracks,
                    Some(&labels),
                    &config,
                )?;
                Ok(loss.total)
            },
            &[scores_t, cameras, points],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "loss gradient error {err}");
    }
}
