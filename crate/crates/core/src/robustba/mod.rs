//! Robust bundle adjustment: a Huber-robustified Levenberg-Marquardt
//! solve, reprojection/view-count point filtering, view-graph
//! largest-component pruning, and a final retriangulate + standard BA
//! round.

mod lm;

pub use lm::{SolveStatus, SolveSummary};

use std::collections::BTreeSet;

use crate::error::{Result, SfmError};
use crate::geometry::{self, CameraPose, Point3};
use crate::trackstore::{pixel_distance, Observation, TrackTensor};

/// Robust bundle adjustment parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustBAConfig {
    /// Huber parameter applied to the squared residual norm during the
    /// robust round. Interpreted in pixels when `huber_pixel_units` is
    /// set and the tensor carries intrinsics, else in normalized units.
    pub huber_delta: f64,
    /// Evaluate the Huber boundary in pixel units (per-camera focal
    /// scaling). Pixel units keep the boundary far below gross-outlier
    /// residuals, which normalized units do not at realistic focals.
    pub huber_pixel_units: bool,
    /// Iteration cap per LM solve.
    pub max_iterations: usize,
    /// Maximum pixel reprojection error a 3D point may have.
    pub reproj_filter_px: f64,
    /// Minimum observing cameras a 3D point must keep.
    pub min_views: usize,
    /// Thread cap for residual/Jacobian evaluation.
    pub threads: usize,
}

impl Default for RobustBAConfig {
    fn default() -> Self {
        RobustBAConfig {
            huber_delta: 0.1,
            huber_pixel_units: true,
            max_iterations: 300,
            reproj_filter_px: 5.0,
            min_views: 3,
            threads: 1,
        }
    }
}

/// Poses, points, and the observations tying them together. The tensor
/// must be normalized (the solver works in normalized coordinates) and
/// carries the intrinsics used for pixel-unit filtering.
#[derive(Debug, Clone)]
pub struct BAProblem {
    pub poses: Vec<CameraPose>,
    pub points: Vec<Point3>,
    pub observations: TrackTensor,
}

impl BAProblem {
    pub fn new(poses: Vec<CameraPose>, points: Vec<Point3>, observations: TrackTensor) -> Result<Self> {
        if !observations.normalized() {
            return Err(SfmError::NotNormalized);
        }
        if poses.len() != observations.num_cameras() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} poses", observations.num_cameras()),
                got: format!("{}", poses.len()),
            });
        }
        if points.len() != observations.num_tracks() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} points", observations.num_tracks()),
                got: format!("{}", points.len()),
            });
        }
        Ok(BAProblem { poses, points, observations })
    }

    /// Mean reprojection error over all observations, normalized units.
    pub fn mean_reprojection(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for obs in self.observations.observations() {
            if let Ok((proj, _)) = geometry::project(&self.poses[obs.camera], &self.points[obs.track]) {
                sum += ((proj[0] - obs.position[0]).powi(2) + (proj[1] - obs.position[1]).powi(2))
                    .sqrt();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean reprojection error in pixels (requires intrinsics).
    pub fn mean_reprojection_px(&self) -> Result<f64> {
        let ks = self.observations.intrinsics().ok_or(SfmError::MissingIntrinsics)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for obs in self.observations.observations() {
            if let Ok((proj, _)) = geometry::project(&self.poses[obs.camera], &self.points[obs.track]) {
                sum += pixel_distance(&ks[obs.camera], proj, obs.position);
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
}

/// Levenberg-Marquardt minimization of the reprojection cost over all
/// poses and points. With `robust` the Huber loss caps each
/// observation's influence; otherwise the plain squared cost is used.
/// Stops on relative cost decrease below 1e-10 or at the iteration cap;
/// if the normal equations stay rank-deficient at every damping level the
/// best iterate so far is returned with a `Stalled` status.
pub fn bundle_adjust(
    problem: &BAProblem,
    robust: bool,
    config: &RobustBAConfig,
) -> Result<(BAProblem, SolveSummary)> {
    let loss = if robust {
        lm::RobustLoss::Huber { delta: config.huber_delta }
    } else {
        lm::RobustLoss::Identity
    };
    let scales = lm::residual_scales(&problem.observations, config.huber_pixel_units);
    let mut poses = problem.poses.clone();
    let mut points = problem.points.clone();
    let summary = lm::minimize(
        &mut poses,
        &mut points,
        &problem.observations,
        loss,
        &scales,
        config.max_iterations,
        config.threads,
    )?;
    Ok((BAProblem::new(poses, points, problem.observations.clone())?, summary))
}

/// Drop 3D points whose maximum pixel reprojection error exceeds the
/// threshold or that are viewed by fewer than `min_views` cameras; the
/// observation set is pruned accordingly. Removing every point is an
/// error.
pub fn filter_points(problem: &BAProblem, config: &RobustBAConfig) -> Result<BAProblem> {
    let ks = problem.observations.intrinsics().ok_or(SfmError::MissingIntrinsics)?;
    let per_track = problem.observations.track_observations();
    let mut keep = Vec::new();
    for (j, obs_indices) in per_track.iter().enumerate() {
        if obs_indices.len() < config.min_views {
            continue;
        }
        let mut max_px = 0.0f64;
        for &i in obs_indices {
            let obs = problem.observations.observations()[i];
            let err = match geometry::project(&problem.poses[obs.camera], &problem.points[j]) {
                Ok((proj, _)) => pixel_distance(&ks[obs.camera], proj, obs.position),
                Err(_) => f64::INFINITY,
            };
            max_px = max_px.max(err);
        }
        if max_px <= config.reproj_filter_px {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(SfmError::AllPointsFiltered);
    }
    let mut track_map = vec![usize::MAX; problem.observations.num_tracks()];
    for (new, &old) in keep.iter().enumerate() {
        track_map[old] = new;
    }
    let observations: Vec<Observation> = problem
        .observations
        .observations()
        .iter()
        .filter(|o| track_map[o.track] != usize::MAX)
        .map(|o| Observation { camera: o.camera, track: track_map[o.track], position: o.position })
        .collect();
    let tensor = TrackTensor::new(
        problem.observations.num_cameras(),
        keep.len(),
        observations,
        true,
        problem.observations.intrinsics().map(|k| k.to_vec()),
    )?;
    let points: Vec<Point3> = keep.iter().map(|&j| problem.points[j]).collect();
    BAProblem::new(problem.poses.clone(), points, tensor)
}

/// Undirected co-observation graph: cameras are nodes, with an edge
/// wherever some track is observed by both endpoints.
#[derive(Debug, Clone)]
pub struct ViewGraph {
    num_cameras: usize,
    adjacency: Vec<BTreeSet<usize>>,
}

impl ViewGraph {
    pub fn from_tensor(tensor: &TrackTensor) -> Self {
        let m = tensor.num_cameras();
        let mut adjacency = vec![BTreeSet::new(); m];
        for obs_indices in tensor.track_observations() {
            for (a_pos, &a_idx) in obs_indices.iter().enumerate() {
                let a = tensor.observations()[a_idx].camera;
                for &b_idx in &obs_indices[a_pos + 1..] {
                    let b = tensor.observations()[b_idx].camera;
                    if a != b {
                        adjacency[a].insert(b);
                        adjacency[b].insert(a);
                    }
                }
            }
        }
        ViewGraph { num_cameras: m, adjacency }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    /// Connected components in ascending order of their smallest camera.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut visited = vec![false; self.num_cameras];
        let mut components = Vec::new();
        for start in 0..self.num_cameras {
            if visited[start] {
                continue;
            }
            let mut queue = vec![start];
            visited[start] = true;
            let mut component = Vec::new();
            while let Some(c) = queue.pop() {
                component.push(c);
                for &next in &self.adjacency[c] {
                    if !visited[next] {
                        visited[next] = true;
                        queue.push(next);
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
        components
    }
}

/// Cameras of the largest connected component; ties go to the component
/// containing the lowest camera index.
pub fn largest_component(graph: &ViewGraph) -> Result<Vec<usize>> {
    let components = graph.components();
    components
        .into_iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .ok_or(SfmError::EmptyViewGraph)
}

/// Result of the 4-step robust pipeline.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Final problem over the registered cameras (re-indexed).
    pub problem: BAProblem,
    /// Original indices of the registered cameras (N_r = len).
    pub registered: Vec<usize>,
    /// Poses over the original camera indexing: refined where registered,
    /// passed through otherwise.
    pub poses_full: Vec<CameraPose>,
    pub robust_summary: SolveSummary,
    pub standard_summary: SolveSummary,
}

/// Restrict a problem to a camera subset, discarding every track that
/// touches a removed camera.
fn restrict_to_cameras(problem: &BAProblem, cameras: &[usize]) -> Result<(BAProblem, Vec<usize>)> {
    let mut selected = cameras.to_vec();
    selected.sort_unstable();
    let mut cam_map = vec![usize::MAX; problem.observations.num_cameras()];
    for (new, &old) in selected.iter().enumerate() {
        cam_map[old] = new;
    }
    let per_track = problem.observations.track_observations();
    let mut kept_tracks = Vec::new();
    for (j, obs_indices) in per_track.iter().enumerate() {
        let touches_removed = obs_indices
            .iter()
            .any(|&i| cam_map[problem.observations.observations()[i].camera] == usize::MAX);
        if !touches_removed && !obs_indices.is_empty() {
            kept_tracks.push(j);
        }
    }
    let mut track_map = vec![usize::MAX; problem.observations.num_tracks()];
    for (new, &old) in kept_tracks.iter().enumerate() {
        track_map[old] = new;
    }
    let observations: Vec<Observation> = problem
        .observations
        .observations()
        .iter()
        .filter(|o| cam_map[o.camera] != usize::MAX && track_map[o.track] != usize::MAX)
        .map(|o| Observation { camera: cam_map[o.camera], track: track_map[o.track], position: o.position })
        .collect();
    let intrinsics = problem
        .observations
        .intrinsics()
        .map(|ks| selected.iter().map(|&c| ks[c]).collect::<Vec<_>>());
    let tensor = TrackTensor::new(selected.len(), kept_tracks.len(), observations, true, intrinsics)?;
    let poses: Vec<CameraPose> = selected.iter().map(|&c| problem.poses[c]).collect();
    let points: Vec<Point3> = kept_tracks.iter().map(|&j| problem.points[j]).collect();
    Ok((BAProblem::new(poses, points, tensor)?, selected))
}

/// Retriangulate every track from the current poses, dropping tracks with
/// degenerate geometry.
fn retriangulate(problem: &BAProblem) -> Result<BAProblem> {
    let per_track = problem.observations.track_observations();
    let mut kept_tracks = Vec::new();
    let mut new_points = Vec::new();
    for (j, obs_indices) in per_track.iter().enumerate() {
        let views: Vec<(CameraPose, [f64; 2])> = obs_indices
            .iter()
            .map(|&i| {
                let o = problem.observations.observations()[i];
                (problem.poses[o.camera], o.position)
            })
            .collect();
        if let Ok(point) = geometry::triangulate(&views) {
            kept_tracks.push(j);
            new_points.push(point);
        }
    }
    if kept_tracks.is_empty() {
        return Err(SfmError::AllPointsFiltered);
    }
    let mut track_map = vec![usize::MAX; problem.observations.num_tracks()];
    for (new, &old) in kept_tracks.iter().enumerate() {
        track_map[old] = new;
    }
    let observations: Vec<Observation> = problem
        .observations
        .observations()
        .iter()
        .filter(|o| track_map[o.track] != usize::MAX)
        .map(|o| Observation { camera: o.camera, track: track_map[o.track], position: o.position })
        .collect();
    let tensor = TrackTensor::new(
        problem.observations.num_cameras(),
        kept_tracks.len(),
        observations,
        true,
        problem.observations.intrinsics().map(|k| k.to_vec()),
    )?;
    BAProblem::new(problem.poses.clone(), new_points, tensor)
}

/// The 4-step robust bundle adjustment: (1) Huber-robust BA, (2) drop
/// points with more than `reproj_filter_px` maximum error or fewer than
/// `min_views` cameras, (3) keep the largest view-graph component and
/// discard tracks touching removed cameras, (4) retriangulate the
/// survivors and run one round of standard (non-robust) BA.
pub fn robust_ba_pipeline(
    poses: Vec<CameraPose>,
    points: Vec<Point3>,
    tracks: TrackTensor,
    config: &RobustBAConfig,
) -> Result<PipelineResult> {
    let problem = BAProblem::new(poses, points, tracks)?;
    let num_cameras = problem.observations.num_cameras();

    // Step 1: robust BA.
    let (problem, robust_summary) = bundle_adjust(&problem, true, config)?;
    // Step 2: error / view-count filtering.
    let filtered = filter_points(&problem, config)?;
    // Step 3: largest component of the view graph.
    let graph = ViewGraph::from_tensor(&filtered.observations);
    // Cameras that lost all observations are no longer registered.
    let counts = filtered.observations.camera_counts();
    let component: Vec<usize> = largest_component(&graph)?
        .into_iter()
        .filter(|&c| counts[c] > 0)
        .collect();
    if component.is_empty() {
        return Err(SfmError::EmptyViewGraph);
    }
    let (restricted, registered) = restrict_to_cameras(&filtered, &component)?;
    // Step 4: retriangulate and standard BA.
    let retri = retriangulate(&restricted)?;
    let (final_problem, standard_summary) = bundle_adjust(&retri, false, config)?;

    let mut poses_full = problem.poses.clone();
    debug_assert_eq!(poses_full.len(), num_cameras);
    for (new, &old) in registered.iter().enumerate() {
        poses_full[old] = final_problem.poses[new];
    }
    Ok(PipelineResult {
        problem: final_problem,
        registered,
        poses_full,
        robust_summary,
        standard_summary,
    })
}
