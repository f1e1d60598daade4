//! Camera model, projection, triangulation, similarity alignment, and
//! pose evaluation metrics.

mod io;

pub use io::{read_points, read_poses, write_ply, write_points, write_poses};

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};

use crate::error::{Result, SfmError};

/// A 3D scene point in scene units.
pub type Point3 = Vector3<f64>;

/// World-to-camera pose: unit quaternion (scalar first) plus translation.
///
/// The camera center is `-R^T t`. Quaternions are normalized and
/// canonicalized to a non-negative scalar part on construction, so `q` and
/// `-q` (the same rotation) serialize identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    q: [f64; 4],
    t: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { q: [1.0, 0.0, 0.0, 0.0], t: Vector3::zeros() }
    }

    /// Build from an arbitrary (non-zero) quaternion and translation.
    pub fn new(q: [f64; 4], t: Vector3<f64>) -> Result<Self> {
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(SfmError::NumericalFailure("zero-length quaternion".into()));
        }
        // Skip the division when already unit: renormalizing a stored
        // unit quaternion must not churn low-order bits.
        let mut q = if (norm - 1.0).abs() > 1e-12 {
            [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]
        } else {
            q
        };
        if q[0] < 0.0 {
            for v in q.iter_mut() {
                *v = -*v;
            }
        }
        Ok(CameraPose { q, t })
    }

    pub fn from_rt(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_matrix(&r);
        let q = uq.quaternion();
        CameraPose::new([q.w, q.i, q.j, q.k], t).expect("unit quaternion from matrix")
    }

    /// Interpret a raw 7-vector head output: translation in the first
    /// three entries, quaternion in the last four (normalized here).
    pub fn from_raw7(v: &[f64]) -> Result<Self> {
        assert_eq!(v.len(), 7);
        CameraPose::new([v[3], v[4], v[5], v[6]], Vector3::new(v[0], v[1], v[2]))
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.q;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Camera center `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.t
    }

    /// Apply a local update: right-multiply the rotation by the small
    /// rotation `exp(delta_rot)` (body frame) and add `delta_t`.
    pub fn retract(&self, delta_rot: &Vector3<f64>, delta_t: &Vector3<f64>) -> CameraPose {
        let e = quat_exp(delta_rot);
        let q = quat_mul(&self.q, &e);
        CameraPose::new(q, self.t + delta_t).expect("retraction keeps a unit quaternion")
    }
}

/// Hamilton product of scalar-first quaternions.
pub(crate) fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Quaternion exponential of a rotation vector (angle-axis).
pub(crate) fn quat_exp(v: &Vector3<f64>) -> [f64; 4] {
    let angle = v.norm();
    if angle < 1e-12 {
        // First-order expansion; normalized by the caller.
        return [1.0, v.x / 2.0, v.y / 2.0, v.z / 2.0];
    }
    let (s, c) = (angle / 2.0).sin_cos();
    let k = s / angle;
    [c, k * v.x, k * v.y, k * v.z]
}

/// Project a point through a pose: returns the normalized image position
/// and the depth (third row of `P` applied to the homogeneous point). The
/// perspective division is carried out for any non-zero depth, including
/// negative ones; only an exactly zero depth is an error.
pub fn project(pose: &CameraPose, point: &Point3) -> Result<([f64; 2], f64)> {
    let y = pose.rotation() * point + pose.t;
    if y.z == 0.0 {
        return Err(SfmError::ZeroDepth);
    }
    Ok(([y.x / y.z, y.y / y.z], y.z))
}

/// Multi-view linear (DLT) triangulation.
///
/// Stacks the cross-product constraints `x * P^3 - P^1` and
/// `y * P^3 - P^2` for every observation and takes the right singular
/// vector of the smallest singular value. Fails for fewer than two views
/// or a geometrically degenerate configuration (identical poses, centers
/// collinear with the point).
pub fn triangulate(observations: &[(CameraPose, [f64; 2])]) -> Result<Point3> {
    if observations.len() < 2 {
        return Err(SfmError::DegenerateTriangulation(format!(
            "{} observations, need 2",
            observations.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (pose, pos)) in observations.iter().enumerate() {
        let r = pose.rotation();
        let t = pose.t;
        // Rows of [R | t].
        let p1 = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x];
        let p2 = [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y];
        let p3 = [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
        for c in 0..4 {
            a[(2 * i, c)] = pos[0] * p3[c] - p1[c];
            a[(2 * i + 1, c)] = pos[1] * p3[c] - p2[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| SfmError::NumericalFailure("SVD failed".into()))?;
    let sv = &svd.singular_values;
    // A well-posed problem has rank 3; a second vanishing singular value
    // signals a degenerate geometry.
    if sv[2] <= 1e-10 * sv[0] {
        return Err(SfmError::DegenerateTriangulation(
            "rank-deficient constraint matrix".into(),
        ));
    }
    let h = v_t.row(v_t.nrows() - 1);
    let w = h[3];
    let xyz_norm = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if w.abs() <= 1e-12 * xyz_norm.max(1e-300) {
        return Err(SfmError::DegenerateTriangulation("point at infinity".into()));
    }
    Ok(Vector3::new(h[0] / w, h[1] / w, h[2] / w))
}

/// Scale + rotation + translation mapping one point set onto another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    q: [f64; 4],
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform { scale: 1.0, q: [1.0, 0.0, 0.0, 0.0], translation: Vector3::zeros() }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_matrix(&rotation);
        let q = uq.quaternion();
        let mut q = [q.w, q.i, q.j, q.k];
        if q[0] < 0.0 {
            for v in q.iter_mut() {
                *v = -*v;
            }
        }
        SimilarityTransform { scale, q, translation }
    }

    pub fn rotation_quaternion(&self) -> [f64; 4] {
        self.q
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        CameraPose { q: self.q, t: Vector3::zeros() }.rotation()
    }

    /// `s * R * p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation() * p) + self.translation
    }
}

/// Closed-form least-squares similarity aligning predicted camera centers
/// onto ground-truth centers: argmin over (s, R, t) of
/// sum ||s R c_pred + t - c_gt||^2.
///
/// Requires at least three cameras with non-collinear centers.
pub fn align_similarity(pred: &[CameraPose], gt: &[CameraPose]) -> Result<SimilarityTransform> {
    if pred.len() != gt.len() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} ground-truth poses", pred.len()),
            got: format!("{}", gt.len()),
        });
    }
    if pred.len() < 3 {
        return Err(SfmError::DegenerateAlignment(format!("{} cameras", pred.len())));
    }
    let k = pred.len() as f64;
    let xs: Vec<Vector3<f64>> = pred.iter().map(|p| p.center()).collect();
    let ys: Vec<Vector3<f64>> = gt.iter().map(|p| p.center()).collect();
    let mx: Vector3<f64> = xs.iter().sum::<Vector3<f64>>() / k;
    let my: Vector3<f64> = ys.iter().sum::<Vector3<f64>>() / k;

    let mut sigma = Matrix3::<f64>::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mx;
        let dy = y - my;
        sigma += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    sigma /= k;
    var_x /= k;

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or_else(|| SfmError::NumericalFailure("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| SfmError::NumericalFailure("SVD failed".into()))?;
    let d = svd.singular_values;
    if d[1] <= 1e-9 * d[0].max(1e-300) {
        return Err(SfmError::DegenerateAlignment("collinear camera centers".into()));
    }
    // Reflection correction keeps det(R) = +1.
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (d[0] * s_diag.x + d[1] * s_diag.y + d[2] * s_diag.z) / var_x;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SfmError::NumericalFailure(format!("non-positive alignment scale {scale}")));
    }
    let t = my - scale * (r * mx);
    Ok(SimilarityTransform::new(scale, r, t))
}

/// Per-camera pose errors after similarity alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrors {
    pub rotation_deg: Vec<f64>,
    pub translation: Vec<f64>,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    pub mean_translation: f64,
    pub median_translation: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Rotation angle between predicted (aligned) and ground-truth rotations,
/// in degrees, plus Euclidean distances between aligned predicted centers
/// and ground-truth centers (in ground-truth scene units).
pub fn pose_errors(
    pred: &[CameraPose],
    gt: &[CameraPose],
    align: &SimilarityTransform,
) -> Result<PoseErrors> {
    if pred.len() != gt.len() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} ground-truth poses", pred.len()),
            got: format!("{}", gt.len()),
        });
    }
    let r_align_t = align.rotation().transpose();
    let mut rotation_deg = Vec::with_capacity(pred.len());
    let mut translation = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        // Remapping world coordinates by the aligning similarity turns a
        // world-to-camera rotation R into R * R_align^T.
        let r_rel = (p.rotation() * r_align_t) * g.rotation().transpose();
        // atan2 of the skew and trace parts stays well conditioned near
        // zero, where acos((tr-1)/2) loses half the digits.
        let sin = 0.5
            * Vector3::new(
                r_rel[(2, 1)] - r_rel[(1, 2)],
                r_rel[(0, 2)] - r_rel[(2, 0)],
                r_rel[(1, 0)] - r_rel[(0, 1)],
            )
            .norm();
        let cos = (r_rel.trace() - 1.0) / 2.0;
        rotation_deg.push(sin.atan2(cos).to_degrees());
        translation.push((align.apply(&p.center()) - g.center()).norm());
    }
    Ok(PoseErrors {
        mean_rotation_deg: mean(&rotation_deg),
        median_rotation_deg: median(&rotation_deg),
        mean_translation: mean(&translation),
        median_translation: median(&translation),
        rotation_deg,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rand_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle: f64 = rng.random_range(-0.8..0.8);
        let r = UnitQuaternion::from_scaled_axis(axis.normalize() * angle).to_rotation_matrix();
        CameraPose::from_rt(
            *r.matrix(),
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(2.0..4.0),
            ),
        )
    }

    #[test]
    fn project_identity() {
        let ((x, y), d) = {
            let (p, d) = project(&CameraPose::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
            ((p[0], p[1]), d)
        };
        assert_eq!((x, y, d), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_hand_arithmetic() {
        let pose = CameraPose::new([1.0, 0.0, 0.0, 0.0], Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let (p, d) = project(&pose, &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, [0.5, 0.0]);
        assert_eq!(d, 2.0);
    }

    #[test]
    fn project_negative_depth_is_reported() {
        let pose = CameraPose::identity();
        let (p, d) = project(&pose, &Vector3::new(0.5, 0.0, -1.0)).unwrap();
        assert_eq!(d, -1.0);
        assert_eq!(p, [-0.5, 0.0]);
    }

    #[test]
    fn project_zero_depth_is_an_error() {
        let pose = CameraPose::identity();
        assert!(matches!(
            project(&pose, &Vector3::new(0.5, 0.0, 0.0)),
            Err(SfmError::ZeroDepth)
        ));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pose = rand_pose(&mut rng);
            let r = pose.rotation();
            let should_be_i = r.transpose() * r;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((should_be_i[(i, j)] - expect).abs() < 1e-12);
                }
            }
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn center_satisfies_rc_plus_t_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pose = rand_pose(&mut rng);
            let residual = pose.rotation() * pose.center() + pose.translation();
            assert!(residual.norm() < 1e-14);
        }
    }

    #[test]
    fn quaternion_canonicalized_to_nonnegative_scalar() {
        let p = CameraPose::new([-0.5, 0.5, 0.5, 0.5], Vector3::zeros()).unwrap();
        assert!(p.quaternion()[0] >= 0.0);
        let q = CameraPose::new([0.5, -0.5, -0.5, -0.5], Vector3::zeros()).unwrap();
        assert_eq!(p.rotation(), q.rotation());
    }

    #[test]
    fn triangulate_inverts_exact_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let point = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let observations: Vec<(CameraPose, [f64; 2])> = (0..2)
                .map(|_| {
                    let pose = rand_pose(&mut rng);
                    let (pos, _) = project(&pose, &point).unwrap();
                    (pose, pos)
                })
                .collect();
            let recovered = triangulate(&observations).unwrap();
            assert!((recovered - point).norm() < 1e-9, "error {}", (recovered - point).norm());
        }
    }

    #[test]
    fn triangulate_with_noise_recovers_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        for _ in 0..20 {
            let point = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let observations: Vec<(CameraPose, [f64; 2])> = (0..5)
                .map(|_| {
                    let pose = rand_pose(&mut rng);
                    let (mut pos, _) = project(&pose, &point).unwrap();
                    pos[0] += noise.sample(&mut rng);
                    pos[1] += noise.sample(&mut rng);
                    (pose, pos)
                })
                .collect();
            let recovered = triangulate(&observations).unwrap();
            assert!((recovered - point).norm() < 1e-2, "error {}", (recovered - point).norm());
        }
    }

    #[test]
    fn triangulate_identical_poses_is_degenerate() {
        let pose = CameraPose::new([1.0, 0.0, 0.0, 0.0], Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let point = Vector3::new(0.1, 0.2, 0.5);
        let (pos, _) = project(&pose, &point).unwrap();
        let result = triangulate(&[(pose, pos), (pose, pos)]);
        assert!(matches!(result, Err(SfmError::DegenerateTriangulation(_))));
    }

    #[test]
    fn triangulate_fewer_than_two_views_fails() {
        let pose = CameraPose::identity();
        assert!(triangulate(&[(pose, [0.0, 0.0])]).is_err());
    }

    #[test]
    fn project_after_triangulate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let point = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let observations: Vec<(CameraPose, [f64; 2])> = (0..4)
                .map(|_| {
                    let pose = rand_pose(&mut rng);
                    let (pos, _) = project(&pose, &point).unwrap();
                    (pose, pos)
                })
                .collect();
            let recovered = triangulate(&observations).unwrap();
            for (pose, pos) in &observations {
                let (reproj, _) = project(pose, &recovered).unwrap();
                assert!((reproj[0] - pos[0]).abs() < 1e-9);
                assert!((reproj[1] - pos[1]).abs() < 1e-9);
            }
        }
    }

    fn ring_poses(n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let center = Vector3::new(3.0 * angle.cos(), 3.0 * angle.sin(), 0.3 * (3.0 * angle).sin());
                let z = (-center).normalize();
                let x = Vector3::new(0.0, 0.0, 1.0).cross(&z).normalize();
                let y = z.cross(&x);
                let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
                CameraPose::from_rt(r, -r * center)
            })
            .collect()
    }

    #[test]
    fn align_identity_when_pred_equals_gt() {
        let poses = ring_poses(6);
        let s = align_similarity(&poses, &poses).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert!((s.rotation() - Matrix3::identity()).norm() < 1e-9);
        assert!(s.translation.norm() < 1e-9);
    }

    #[test]
    fn align_recovers_planted_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let gt = ring_poses(8);
            let planted_r = UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ))
            .to_rotation_matrix();
            let planted = SimilarityTransform::new(
                rng.random_range(0.5..2.0),
                *planted_r.matrix(),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            // Build "pred" poses whose centers are the planted transform
            // applied inversely, so aligning pred onto gt recovers it.
            let pred: Vec<CameraPose> = gt
                .iter()
                .map(|p| {
                    let c = p.center();
                    let r = p.rotation() * planted.rotation();
                    let c_pred = (planted.rotation().transpose() * (c - planted.translation))
                        / planted.scale;
                    CameraPose::from_rt(r, -r * c_pred)
                })
                .collect();
            let align = align_similarity(&pred, &gt).unwrap();
            assert_relative_eq!(align.scale, planted.scale, epsilon = 1e-9);
            assert!((align.rotation() - planted.rotation()).norm() < 1e-9);
            assert!((align.translation - planted.translation).norm() < 1e-9);
            // And the aligned centers coincide with ground truth.
            let errors = pose_errors(&pred, &gt, &align).unwrap();
            assert!(errors.mean_translation < 1e-9);
            assert!(errors.mean_rotation_deg < 1e-6);
        }
    }

    #[test]
    fn align_two_cameras_is_an_error() {
        let poses = ring_poses(6);
        assert!(matches!(
            align_similarity(&poses[..2], &poses[..2]),
            Err(SfmError::DegenerateAlignment(_))
        ));
    }

    #[test]
    fn align_collinear_centers_is_an_error() {
        let poses: Vec<CameraPose> = (0..4)
            .map(|i| {
                CameraPose::new([1.0, 0.0, 0.0, 0.0], Vector3::new(i as f64, 0.0, 0.0)).unwrap()
            })
            .collect();
        assert!(matches!(
            align_similarity(&poses, &poses),
            Err(SfmError::DegenerateAlignment(_))
        ));
    }

    #[test]
    fn pose_errors_zero_for_identical_sets() {
        let poses = ring_poses(5);
        let errors = pose_errors(&poses, &poses, &SimilarityTransform::identity()).unwrap();
        assert!(errors.rotation_deg.iter().all(|&e| e < 1e-9));
        assert!(errors.translation.iter().all(|&e| e < 1e-12));
    }

    #[test]
    fn pose_errors_constructed_rotation_angle() {
        let gt = ring_poses(5);
        let ten_deg = UnitQuaternion::from_scaled_axis(
            Vector3::new(0.0, 0.0, 1.0) * (10.0f64).to_radians(),
        )
        .to_rotation_matrix();
        // Rotate each camera's orientation in place, keeping the center.
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                let r = *ten_deg.matrix() * p.rotation();
                CameraPose::from_rt(r, -r * p.center())
            })
            .collect();
        let errors = pose_errors(&pred, &gt, &SimilarityTransform::identity()).unwrap();
        for &e in &errors.rotation_deg {
            assert_relative_eq!(e, 10.0, epsilon = 1e-9);
        }
        for &e in &errors.translation {
            assert!(e < 1e-12);
        }
    }

    #[test]
    fn pose_errors_unit_center_offset() {
        let gt = ring_poses(5);
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                let c = p.center() + Vector3::new(1.0, 0.0, 0.0);
                let r = p.rotation();
                CameraPose::from_rt(r, -r * c)
            })
            .collect();
        let errors = pose_errors(&pred, &gt, &SimilarityTransform::identity()).unwrap();
        for &e in &errors.translation {
            assert_relative_eq!(e, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_error_invariant_to_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = ring_poses(7);
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|p| {
                let jitter = UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ));
                let r = *jitter.to_rotation_matrix().matrix() * p.rotation();
                CameraPose::from_rt(r, -r * p.center())
            })
            .collect();
        let base = {
            let align = align_similarity(&pred, &gt).unwrap();
            pose_errors(&pred, &gt, &align).unwrap().mean_rotation_deg
        };
        // Apply one common world rotation to both sets.
        let common = UnitQuaternion::from_scaled_axis(Vector3::new(0.4, -0.2, 0.9));
        let rc = *common.to_rotation_matrix().matrix();
        let remap = |poses: &[CameraPose]| -> Vec<CameraPose> {
            poses
                .iter()
                .map(|p| {
                    let r = p.rotation() * rc.transpose();
                    let c = rc * p.center();
                    CameraPose::from_rt(r, -r * c)
                })
                .collect()
        };
        let pred2 = remap(&pred);
        let gt2 = remap(&gt);
        let align2 = align_similarity(&pred2, &gt2).unwrap();
        let rotated = pose_errors(&pred2, &gt2, &align2).unwrap().mean_rotation_deg;
        assert_relative_eq!(base, rotated, epsilon = 1e-9);
    }
}
