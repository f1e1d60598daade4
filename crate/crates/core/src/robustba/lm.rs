//! Levenberg-Marquardt over poses and points with a Schur complement on
//! the point blocks.
//!
//! Each camera contributes a 6-dof block (3 rotation tangent, 3
//! translation), each point a 3-dof block. Residuals use the convention
//! `r = observed - projected`; Jacobians below are of the projection, so
//! the normal equations read `(J^T W J + lambda D) step = J^T W r` and
//! the step is added. Robustness enters through per-observation IRLS
//! weights `w = rho'(|r|^2)` with the Huber rho applied to the squared
//! residual norm; accept/reject decisions compare the true robustified
//! cost `sum rho(|r|^2)`.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix6, Vector2, Vector3, Vector6,
};

use crate::error::{Result, SfmError};
use crate::geometry::{CameraPose, Point3};
use crate::parallel;
use crate::trackstore::TrackTensor;

/// Multiplicative damping schedule and bounds.
const LAMBDA_INIT: f64 = 1e-4;
const LAMBDA_UP: f64 = 10.0;
const LAMBDA_DOWN: f64 = 10.0;
const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-14;
/// Relative cost decrease below which an accepted step means convergence.
const RELATIVE_TOL: f64 = 1e-10;
/// A cost this small is treated as an exact fit.
const ABSOLUTE_TOL: f64 = 1e-20;
/// Floor for Marquardt diagonal scaling (guards gauge directions).
const DIAG_FLOOR: f64 = 1e-8;

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Normal equations stayed rank-deficient (or steps kept failing) at
    /// every damping level; the best iterate is returned.
    Stalled,
}

/// Solve statistics; `accepted_costs` is the sequence of costs after each
/// accepted step (monotone non-increasing).
#[derive(Debug, Clone)]
pub struct SolveSummary {
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_costs: Vec<f64>,
}

/// Huber robustifier applied to the squared residual norm, Ceres
/// convention: `rho(s) = s` for `s <= delta^2`, else
/// `2 delta sqrt(s) - delta^2`.
///
/// The residual entering rho is scaled per camera (normalized units
/// times the focal length puts the boundary in pixels); `scale = 1`
/// keeps normalized units. The IRLS weight carries the chain-rule
/// factor: for cost `rho(k^2 s)` the weight is `k^2 rho'(k^2 s)`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RobustLoss {
    Identity,
    Huber { delta: f64 },
}

impl RobustLoss {
    fn rho(&self, s: f64, scale: f64) -> f64 {
        match self {
            RobustLoss::Identity => s,
            RobustLoss::Huber { delta } => {
                let k2 = scale * scale;
                let s = s * k2;
                let b = delta * delta;
                if s <= b {
                    s
                } else {
                    2.0 * delta * s.sqrt() - b
                }
            }
        }
    }

    fn weight(&self, s: f64, scale: f64) -> f64 {
        match self {
            RobustLoss::Identity => 1.0,
            RobustLoss::Huber { delta } => {
                let k2 = scale * scale;
                let s = s * k2;
                let b = delta * delta;
                if s <= b {
                    k2
                } else {
                    k2 * delta / s.sqrt()
                }
            }
        }
    }
}

/// Per-observation linearization.
struct ObsBlock {
    cam: usize,
    point: usize,
    j_pose: Matrix2x6<f64>,
    j_point: Matrix2x3<f64>,
    residual: Vector2<f64>,
    weight: f64,
}

/// Projection residual and Jacobians at the current state.
///
/// With `Y = R X + t`, `u = (Y_x / Y_z, Y_y / Y_z)` and the local pose
/// update `R <- R exp([delta]_x)`, `t <- t + delta_t`:
/// `du/d delta_rot = -A R [X]_x`, `du/d delta_t = A`, `du/dX = A R`,
/// where `A` is the 2x3 perspective-division Jacobian.
fn linearize_observation(
    pose: &CameraPose,
    point: &Point3,
    observed: [f64; 2],
    loss: &RobustLoss,
    scale: f64,
) -> Option<(Matrix2x6<f64>, Matrix2x3<f64>, Vector2<f64>, f64)> {
    let r_mat = pose.rotation();
    let y = r_mat * point + pose.translation();
    if y.z == 0.0 {
        return None;
    }
    let inv_z = 1.0 / y.z;
    let u = Vector2::new(y.x * inv_z, y.y * inv_z);
    let residual = Vector2::new(observed[0] - u.x, observed[1] - u.y);
    let a = Matrix2x3::new(inv_z, 0.0, -y.x * inv_z * inv_z, 0.0, inv_z, -y.y * inv_z * inv_z);
    let skew_x = Matrix3::new(
        0.0, -point.z, point.y, //
        point.z, 0.0, -point.x, //
        -point.y, point.x, 0.0,
    );
    let j_point = a * r_mat;
    let j_rot = -j_point * skew_x;
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&a);
    let weight = loss.weight(residual.norm_squared(), scale);
    Some((j_pose, j_point, residual, weight))
}

/// Per-camera residual scale factors for the robustifier (mean focal
/// length when intrinsics are present and pixel units requested).
pub(crate) fn residual_scales(tensor: &TrackTensor, pixel_units: bool) -> Vec<f64> {
    match (pixel_units, tensor.intrinsics()) {
        (true, Some(ks)) => {
            ks.iter().map(|k| (k[(0, 0)].abs() + k[(1, 1)].abs()) / 2.0).collect()
        }
        _ => vec![1.0; tensor.num_cameras()],
    }
}

pub(crate) fn total_cost(
    poses: &[CameraPose],
    points: &[Point3],
    tensor: &TrackTensor,
    loss: &RobustLoss,
    scales: &[f64],
) -> f64 {
    let mut cost = 0.0;
    for obs in tensor.observations() {
        let pose = &poses[obs.camera];
        let y = pose.rotation() * points[obs.track] + pose.translation();
        if y.z == 0.0 {
            // Treat an exactly-degenerate projection as a huge residual.
            cost += loss.rho(1e12, scales[obs.camera]);
            continue;
        }
        let u = [y.x / y.z, y.y / y.z];
        let s = (obs.position[0] - u[0]).powi(2) + (obs.position[1] - u[1]).powi(2);
        cost += loss.rho(s, scales[obs.camera]);
    }
    cost
}

fn clamped_diag6(m: &Matrix6<f64>) -> Vector6<f64> {
    Vector6::from_fn(|i, _| m[(i, i)].max(DIAG_FLOOR))
}

fn clamped_diag3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| m[(i, i)].max(DIAG_FLOOR))
}

/// State for one damped solve attempt: the Hessian blocks at the current
/// linearization point.
struct NormalBlocks {
    cam_blocks: Vec<Matrix6<f64>>,
    point_blocks: Vec<Matrix3<f64>>,
    cam_grad: Vec<Vector6<f64>>,
    point_grad: Vec<Vector3<f64>>,
    /// Per point: (camera, E_ij) coupling blocks of its observations.
    couplings: Vec<Vec<(usize, nalgebra::Matrix6x3<f64>)>>,
}

fn assemble(
    poses: &[CameraPose],
    points: &[Point3],
    tensor: &TrackTensor,
    loss: &RobustLoss,
    scales: &[f64],
    threads: usize,
) -> NormalBlocks {
    let m = poses.len();
    let n = points.len();
    let blocks: Vec<Option<ObsBlock>> = parallel::chunked_map(tensor.observations(), threads, |obs| {
        linearize_observation(
            &poses[obs.camera],
            &points[obs.track],
            obs.position,
            loss,
            scales[obs.camera],
        )
        .map(
            |(j_pose, j_point, residual, weight)| ObsBlock {
                cam: obs.camera,
                point: obs.track,
                j_pose,
                j_point,
                residual,
                weight,
            },
        )
    });

    let mut nb = NormalBlocks {
        cam_blocks: vec![Matrix6::zeros(); m],
        point_blocks: vec![Matrix3::zeros(); n],
        cam_grad: vec![Vector6::zeros(); m],
        point_grad: vec![Vector3::zeros(); n],
        couplings: vec![Vec::new(); n],
    };
    for block in blocks.into_iter().flatten() {
        let w = block.weight;
        let jp_t = block.j_pose.transpose();
        let jx_t = block.j_point.transpose();
        nb.cam_blocks[block.cam] += w * jp_t * block.j_pose;
        nb.point_blocks[block.point] += w * jx_t * block.j_point;
        nb.cam_grad[block.cam] += w * jp_t * block.residual;
        nb.point_grad[block.point] += w * jx_t * block.residual;
        nb.couplings[block.point].push((block.cam, w * jp_t * block.j_point));
    }
    nb
}

/// One damped Schur solve: camera steps from the reduced system, point
/// steps by back-substitution. `None` when the reduced system is not
/// positive definite at this damping.
fn solve_damped(nb: &NormalBlocks, lambda: f64) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let m = nb.cam_blocks.len();
    let n = nb.point_blocks.len();

    // Damped point blocks and their inverses.
    let mut c_inv = Vec::with_capacity(n);
    for j in 0..n {
        let mut c = nb.point_blocks[j];
        let d = clamped_diag3(&c);
        for i in 0..3 {
            c[(i, i)] += lambda * d[i];
        }
        c_inv.push(c.try_inverse()?);
    }

    // Reduced camera system S = B - E C^-1 E^T.
    let mut s = DMatrix::<f64>::zeros(6 * m, 6 * m);
    let mut rhs = DVector::<f64>::zeros(6 * m);
    for i in 0..m {
        let mut b = nb.cam_blocks[i];
        let d = clamped_diag6(&b);
        for k in 0..6 {
            b[(k, k)] += lambda * d[k];
        }
        s.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&b);
        rhs.rows_mut(6 * i, 6).copy_from(&nb.cam_grad[i]);
    }
    for j in 0..n {
        let gj = c_inv[j] * nb.point_grad[j];
        for (a, e_a) in &nb.couplings[j] {
            let e_a_cinv = e_a * c_inv[j];
            for (b, e_b) in &nb.couplings[j] {
                let block = e_a_cinv * e_b.transpose();
                let mut view = s.view_mut((6 * a, 6 * b), (6, 6));
                for r in 0..6 {
                    for c in 0..6 {
                        view[(r, c)] -= block[(r, c)];
                    }
                }
            }
            let contrib = e_a * gj;
            for r in 0..6 {
                rhs[6 * a + r] -= contrib[r];
            }
        }
    }

    let chol = s.cholesky()?;
    let cam_step_flat = chol.solve(&rhs);
    let cam_steps: Vec<Vector6<f64>> =
        (0..m).map(|i| Vector6::from_iterator(cam_step_flat.rows(6 * i, 6).iter().copied())).collect();

    let mut point_steps = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = nb.point_grad[j];
        for (a, e_a) in &nb.couplings[j] {
            acc -= e_a.transpose() * cam_steps[*a];
        }
        point_steps.push(c_inv[j] * acc);
    }
    Some((cam_steps, point_steps))
}

fn apply_steps(
    poses: &[CameraPose],
    points: &[Point3],
    cam_steps: &[Vector6<f64>],
    point_steps: &[Vector3<f64>],
) -> (Vec<CameraPose>, Vec<Point3>) {
    let new_poses = poses
        .iter()
        .zip(cam_steps)
        .map(|(pose, step)| {
            let rot = Vector3::new(step[0], step[1], step[2]);
            let trans = Vector3::new(step[3], step[4], step[5]);
            pose.retract(&rot, &trans)
        })
        .collect();
    let new_points = points.iter().zip(point_steps).map(|(p, s)| p + s).collect();
    (new_poses, new_points)
}

/// Minimize the (optionally robustified) reprojection cost. Poses and
/// points are updated in place.
pub(crate) fn minimize(
    poses: &mut Vec<CameraPose>,
    points: &mut Vec<Point3>,
    tensor: &TrackTensor,
    loss: RobustLoss,
    scales: &[f64],
    max_iterations: usize,
    threads: usize,
) -> Result<SolveSummary> {
    if tensor.is_empty() {
        return Err(SfmError::EmptyTensor);
    }
    let mut cost = total_cost(poses, points, tensor, &loss, scales);
    let initial_cost = cost;
    let mut accepted_costs = Vec::new();
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0usize;
    let mut status = SolveStatus::MaxIterations;

    'outer: while iterations < max_iterations {
        if cost <= ABSOLUTE_TOL {
            status = SolveStatus::Converged;
            break;
        }
        let nb = assemble(poses, points, tensor, &loss, scales, threads);
        // Reuse the linearization across damping retries.
        loop {
            if iterations >= max_iterations {
                break 'outer;
            }
            iterations += 1;
            let solved = solve_damped(&nb, lambda);
            let Some((cam_steps, point_steps)) = solved else {
                lambda *= LAMBDA_UP;
                if lambda > LAMBDA_MAX {
                    status = SolveStatus::Stalled;
                    break 'outer;
                }
                continue;
            };
            let (new_poses, new_points) = apply_steps(poses, points, &cam_steps, &point_steps);
            let new_cost = total_cost(&new_poses, &new_points, tensor, &loss, scales);
            if new_cost.is_finite() && new_cost < cost {
                let decrease = cost - new_cost;
                *poses = new_poses;
                *points = new_points;
                cost = new_cost;
                accepted_costs.push(cost);
                lambda = (lambda / LAMBDA_DOWN).max(LAMBDA_MIN);
                if decrease <= RELATIVE_TOL * cost.max(ABSOLUTE_TOL) {
                    status = SolveStatus::Converged;
                    break 'outer;
                }
                break; // re-linearize
            }
            lambda *= LAMBDA_UP;
            if lambda > LAMBDA_MAX {
                status = SolveStatus::Stalled;
                break 'outer;
            }
        }
    }

    Ok(SolveSummary { status, iterations, initial_cost, final_cost: cost, accepted_costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;

    /// Finite-difference check of the analytic gradient `J^T r` under the
    /// local parameterization (rotation tangent, translation, point).
    #[test]
    fn gradient_matches_finite_differences() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let poses: Vec<CameraPose> = (0..3)
            .map(|i| {
                let angle = 2.1 * i as f64 + 0.4;
                let c = Vector3::new(3.0 * angle.cos(), 3.0 * angle.sin(), 0.5 * i as f64);
                let z = (-c).normalize();
                let x = Vector3::new(0.0, 0.0, 1.0).cross(&z).normalize();
                let y = z.cross(&x);
                let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
                CameraPose::from_rt(r, -r * c)
            })
            .collect();
        let points: Vec<Point3> = (0..5)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                )
            })
            .collect();
        let mut obs = Vec::new();
        for (j, p) in points.iter().enumerate() {
            for (i, pose) in poses.iter().enumerate() {
                let (proj, _) = geometry::project(pose, p).unwrap();
                obs.push(crate::trackstore::Observation {
                    camera: i,
                    track: j,
                    position: [
                        proj[0] + rng.random_range(-0.02..0.02),
                        proj[1] + rng.random_range(-0.02..0.02),
                    ],
                });
            }
        }
        let tensor = TrackTensor::new(3, 5, obs, true, None).unwrap();
        let loss = RobustLoss::Identity;
        let scales = vec![1.0; 3];

        // Analytic gradient of cost = sum |r|^2 under theta += delta is
        // -2 J^T r for the prediction Jacobian J.
        let nb = assemble(&poses, &points, &tensor, &loss, &scales, 1);
        let step = 1e-6;
        for (i, pose) in poses.iter().enumerate() {
            for k in 0..6 {
                let mut delta = Vector6::zeros();
                delta[k] = step;
                let perturb = |sign: f64| -> f64 {
                    let d = delta * sign;
                    let p2 = pose.retract(
                        &Vector3::new(d[0], d[1], d[2]),
                        &Vector3::new(d[3], d[4], d[5]),
                    );
                    let mut test_poses = poses.clone();
                    test_poses[i] = p2;
                    total_cost(&test_poses, &points, &tensor, &loss, &scales)
                };
                let numeric = (perturb(1.0) - perturb(-1.0)) / (2.0 * step);
                let analytic = -2.0 * nb.cam_grad[i][k];
                assert!(
                    (numeric - analytic).abs() < 1e-5 * numeric.abs().max(1.0),
                    "pose {i} dof {k}: {numeric} vs {analytic}"
                );
            }
        }
        for (j, point) in points.iter().enumerate() {
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = step;
                let mut pp = points.clone();
                pp[j] = point + d;
                let mut pm = points.clone();
                pm[j] = point - d;
                let numeric = (total_cost(&poses, &pp, &tensor, &loss, &scales)
                    - total_cost(&poses, &pm, &tensor, &loss, &scales))
                    / (2.0 * step);
                let analytic = -2.0 * nb.point_grad[j][k];
                assert!(
                    (numeric - analytic).abs() < 1e-5 * numeric.abs().max(1.0),
                    "point {j} dof {k}: {numeric} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn huber_matches_piecewise_definition() {
        let loss = RobustLoss::Huber { delta: 0.1 };
        assert_eq!(loss.rho(0.005, 1.0), 0.005);
        let s = 0.04; // above delta^2 = 0.01
        assert!((loss.rho(s, 1.0) - (2.0 * 0.1 * s.sqrt() - 0.01)).abs() < 1e-15);
        assert_eq!(loss.weight(0.005, 1.0), 1.0);
        assert!((loss.weight(s, 1.0) - 0.1 / s.sqrt()).abs() < 1e-15);
        // Pixel scaling: s = (2px/f)^2 normalized, scale = f.
        let f = 1000.0;
        let s_norm = (2.0 / f) * (2.0 / f);
        assert!((loss.rho(s_norm, f) - (2.0 * 0.1 * 2.0 - 0.01)).abs() < 1e-12);
        assert!((loss.weight(s_norm, f) - f * f * 0.1 / 2.0).abs() < 1e-6);
    }
}
