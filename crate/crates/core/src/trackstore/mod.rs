//! The sparse point-track tensor and its construction pipeline.
//!
//! Tracks are chained from pairwise keypoint matches, normalized into
//! camera coordinates with the known intrinsics, optionally labeled
//! against a reference reconstruction, and filtered by predicted outlier
//! scores. Every module downstream consumes the [`TrackTensor`] built
//! here.

pub(crate) mod io;

pub use io::{read_matches, read_tracks, write_matches, write_tracks};

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::error::{Result, SfmError};
use crate::geometry::{self, CameraPose};

/// Minimum number of observing cameras for a track to survive.
pub const MIN_TRACK_VIEWS: usize = 3;

/// Pixel reprojection threshold for inlier labeling.
pub const LABEL_PIXEL_THRESHOLD: f64 = 4.0;

/// A single 2D measurement of one track in one camera.
///
/// Positions are in pixels before normalization and in unitless normalized
/// camera coordinates afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub track: usize,
    pub position: [f64; 2],
}

/// Sparse m x n x 2 measurement tensor with a presence mask.
///
/// Rows are cameras, columns are tracks. Observations are kept sorted by
/// (camera, track), so tensors built from the same observation set compare
/// equal regardless of insertion order. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTensor {
    num_cameras: usize,
    num_tracks: usize,
    observations: Vec<Observation>,
    normalized: bool,
    intrinsics: Option<Vec<Matrix3<f64>>>,
}

impl TrackTensor {
    /// Validates the tensor invariants: indices in range, at most one
    /// observation per (camera, track) cell, at least
    /// [`MIN_TRACK_VIEWS`] observations per track, finite positions.
    pub fn new(
        num_cameras: usize,
        num_tracks: usize,
        mut observations: Vec<Observation>,
        normalized: bool,
        intrinsics: Option<Vec<Matrix3<f64>>>,
    ) -> Result<Self> {
        if let Some(ks) = &intrinsics {
            if ks.len() != num_cameras {
                return Err(SfmError::ShapeMismatch {
                    expected: format!("{num_cameras} intrinsic matrices"),
                    got: format!("{}", ks.len()),
                });
            }
        }
        observations.sort_by(|a, b| (a.camera, a.track).cmp(&(b.camera, b.track)));
        let mut per_track = vec![0usize; num_tracks];
        for (i, obs) in observations.iter().enumerate() {
            if obs.camera >= num_cameras || obs.track >= num_tracks {
                return Err(SfmError::ShapeMismatch {
                    expected: format!("indices below ({num_cameras}, {num_tracks})"),
                    got: format!("({}, {})", obs.camera, obs.track),
                });
            }
            if !(obs.position[0].is_finite() && obs.position[1].is_finite()) {
                return Err(SfmError::NumericalFailure(format!(
                    "non-finite observation at ({}, {})",
                    obs.camera, obs.track
                )));
            }
            if i > 0 {
                let prev = &observations[i - 1];
                if prev.camera == obs.camera && prev.track == obs.track {
                    return Err(SfmError::InvalidConfig(format!(
                        "duplicate observation at ({}, {})",
                        obs.camera, obs.track
                    )));
                }
            }
            per_track[obs.track] += 1;
        }
        for (j, &count) in per_track.iter().enumerate() {
            if count < MIN_TRACK_VIEWS {
                return Err(SfmError::InvalidConfig(format!(
                    "track {j} has {count} observations, needs {MIN_TRACK_VIEWS}"
                )));
            }
        }
        Ok(TrackTensor { num_cameras, num_tracks, observations, normalized, intrinsics })
    }

    /// An empty tensor over `num_cameras` cameras (no tracks).
    pub fn empty(num_cameras: usize) -> Self {
        TrackTensor {
            num_cameras,
            num_tracks: 0,
            observations: Vec::new(),
            normalized: false,
            intrinsics: None,
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn intrinsics(&self) -> Option<&[Matrix3<f64>]> {
        self.intrinsics.as_deref()
    }

    /// Index of the observation at cell (camera, track), if present.
    pub fn find(&self, camera: usize, track: usize) -> Option<usize> {
        self.observations
            .binary_search_by(|o| (o.camera, o.track).cmp(&(camera, track)))
            .ok()
    }

    /// Observation indices grouped per track, in camera order.
    pub fn track_observations(&self) -> Vec<Vec<usize>> {
        let mut per_track = vec![Vec::new(); self.num_tracks];
        for (i, obs) in self.observations.iter().enumerate() {
            per_track[obs.track].push(i);
        }
        per_track
    }

    /// Number of observations per camera.
    pub fn camera_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_cameras];
        for obs in &self.observations {
            counts[obs.camera] += 1;
        }
        counts
    }

    /// Flat camera index per observation, aligned with `observations()`.
    pub fn camera_ids(&self) -> Vec<usize> {
        self.observations.iter().map(|o| o.camera).collect()
    }

    /// Flat track index per observation, aligned with `observations()`.
    pub fn track_ids(&self) -> Vec<usize> {
        self.observations.iter().map(|o| o.track).collect()
    }

    /// Restrict the tensor to a camera subset. Cameras are re-indexed in
    /// ascending original order; tracks that fall below the minimum view
    /// count are dropped (stable order), as are cameras left with no
    /// observations.
    pub fn restrict_cameras(&self, cameras: &[usize]) -> Result<RestrictedTensor> {
        let mut selected: Vec<usize> = cameras.to_vec();
        selected.sort_unstable();
        selected.dedup();
        if selected.iter().any(|&c| c >= self.num_cameras) {
            return Err(SfmError::ShapeMismatch {
                expected: format!("camera ids below {}", self.num_cameras),
                got: format!("{selected:?}"),
            });
        }
        let mut cam_map = vec![usize::MAX; self.num_cameras];

        // Count surviving views per track under the restriction.
        let mut views = vec![0usize; self.num_tracks];
        for obs in &self.observations {
            if selected.binary_search(&obs.camera).is_ok() {
                views[obs.track] += 1;
            }
        }
        let kept_tracks: Vec<usize> =
            (0..self.num_tracks).filter(|&j| views[j] >= MIN_TRACK_VIEWS).collect();
        let mut track_map = vec![usize::MAX; self.num_tracks];
        for (new, &old) in kept_tracks.iter().enumerate() {
            track_map[old] = new;
        }

        // Drop selected cameras that observe none of the kept tracks.
        let mut observed = vec![false; self.num_cameras];
        for obs in &self.observations {
            if selected.binary_search(&obs.camera).is_ok() && track_map[obs.track] != usize::MAX {
                observed[obs.camera] = true;
            }
        }
        let kept_cams: Vec<usize> = selected.into_iter().filter(|&c| observed[c]).collect();
        for (new, &old) in kept_cams.iter().enumerate() {
            cam_map[old] = new;
        }

        // The maps are monotone, so the filtered observations stay in
        // canonical (camera, track) order and labels can be re-aligned by
        // index selection.
        let mut observation_indices = Vec::new();
        let mut observations = Vec::new();
        for (i, o) in self.observations.iter().enumerate() {
            if cam_map[o.camera] != usize::MAX && track_map[o.track] != usize::MAX {
                observation_indices.push(i);
                observations.push(Observation {
                    camera: cam_map[o.camera],
                    track: track_map[o.track],
                    position: o.position,
                });
            }
        }
        let intrinsics = self
            .intrinsics
            .as_ref()
            .map(|ks| kept_cams.iter().map(|&c| ks[c]).collect());
        let tensor =
            TrackTensor::new(kept_cams.len(), kept_tracks.len(), observations, self.normalized, intrinsics)?;
        Ok(RestrictedTensor { tensor, cameras: kept_cams, tracks: kept_tracks, observation_indices })
    }
}

/// Result of a camera restriction: the reduced tensor plus the original
/// camera, track, and observation indices that survive.
#[derive(Debug, Clone)]
pub struct RestrictedTensor {
    pub tensor: TrackTensor,
    pub cameras: Vec<usize>,
    pub tracks: Vec<usize>,
    pub observation_indices: Vec<usize>,
}

/// Per-observation boolean outlier labels, aligned with the observation
/// order of the tensor they were built for (true = outlier).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLabels {
    labels: Vec<bool>,
}

impl TrackLabels {
    pub fn new(tensor: &TrackTensor, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != tensor.num_observations() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} labels", tensor.num_observations()),
                got: format!("{}", labels.len()),
            });
        }
        Ok(TrackLabels { labels })
    }

    pub fn all_inlier(tensor: &TrackTensor) -> Self {
        TrackLabels { labels: vec![false; tensor.num_observations()] }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_outlier(&self, obs_index: usize) -> bool {
        self.labels[obs_index]
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Labels as 0/1 targets for the classification loss.
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
    }

    /// Restrict labels to a subset of observation indices of the original
    /// tensor (used alongside `TrackTensor::restrict_cameras`).
    pub fn select(&self, indices: &[usize]) -> TrackLabels {
        TrackLabels { labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// One two-view keypoint match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub image_a: usize,
    pub keypoint_a: usize,
    pub position_a: [f64; 2],
    pub image_b: usize,
    pub keypoint_b: usize,
    pub position_b: [f64; 2],
}

/// Output of the (out-of-scope) two-view matching stage: a list of
/// pairwise keypoint matches to be chained into tracks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairwiseMatches {
    matches: Vec<Match>,
}

impl PairwiseMatches {
    pub fn new(matches: Vec<Match>) -> Result<Self> {
        for m in &matches {
            if m.image_a == m.image_b {
                return Err(SfmError::InvalidConfig(format!(
                    "match within a single image {}",
                    m.image_a
                )));
            }
        }
        Ok(PairwiseMatches { matches })
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Union-find with path compression over keypoint nodes.
struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Chain two-view matches into multi-view tracks.
///
/// Connected components of the keypoint match graph become tracks. A
/// component containing two distinct keypoints of the same image is an
/// inconsistent cycle and is discarded, as is any component viewed in
/// fewer than [`MIN_TRACK_VIEWS`] cameras. Degenerate input yields an
/// empty tensor rather than an error.
pub fn chain_matches(matches: &PairwiseMatches) -> TrackTensor {
    if matches.is_empty() {
        return TrackTensor::empty(0);
    }
    // Keypoint nodes in first-appearance order; positions keyed by
    // (image, keypoint id).
    let mut node_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut nodes: Vec<(usize, usize, [f64; 2])> = Vec::new();
    let mut num_cameras = 0usize;
    let intern = |img: usize, kp: usize, pos: [f64; 2], nodes: &mut Vec<(usize, usize, [f64; 2])>,
                      node_of: &mut BTreeMap<(usize, usize), usize>| {
        *node_of.entry((img, kp)).or_insert_with(|| {
            nodes.push((img, kp, pos));
            nodes.len() - 1
        })
    };
    let mut edges = Vec::with_capacity(matches.len());
    for m in matches.matches() {
        num_cameras = num_cameras.max(m.image_a + 1).max(m.image_b + 1);
        let a = intern(m.image_a, m.keypoint_a, m.position_a, &mut nodes, &mut node_of);
        let b = intern(m.image_b, m.keypoint_b, m.position_b, &mut nodes, &mut node_of);
        edges.push((a, b));
    }
    let mut uf = UnionFind::new(nodes.len());
    for (a, b) in edges {
        uf.union(a, b);
    }

    // Group nodes by component root, keeping first-seen component order so
    // track indices are stable under input order.
    let mut component_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..nodes.len() {
        let root = uf.find(i);
        let slot = *component_of_root.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[slot].push(i);
    }

    let mut observations = Vec::new();
    let mut track = 0usize;
    for comp in &components {
        let mut images: Vec<usize> = comp.iter().map(|&i| nodes[i].0).collect();
        images.sort_unstable();
        let distinct = {
            let mut d = images.clone();
            d.dedup();
            d.len()
        };
        // Inconsistent cycle: two keypoints of the same image in one track.
        if distinct != images.len() || distinct < MIN_TRACK_VIEWS {
            continue;
        }
        for &i in comp {
            let (img, _, pos) = nodes[i];
            observations.push(Observation { camera: img, track, position: pos });
        }
        track += 1;
    }
    TrackTensor::new(num_cameras, track, observations, false, None)
        .expect("chained tracks satisfy tensor invariants by construction")
}

fn invert_intrinsics(ks: &[Matrix3<f64>]) -> Result<Vec<Matrix3<f64>>> {
    ks.iter()
        .enumerate()
        .map(|(i, k)| k.try_inverse().ok_or(SfmError::SingularIntrinsics(i)))
        .collect()
}

fn apply_homogeneous(m: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = m * nalgebra::Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Map pixel observations into normalized camera coordinates via the
/// inverse calibration. The intrinsics are retained on the tensor so
/// pixel-unit thresholds can be applied downstream.
pub fn normalize_tracks(tensor: &TrackTensor, intrinsics: &[Matrix3<f64>]) -> Result<TrackTensor> {
    if tensor.normalized() {
        return Err(SfmError::InvalidConfig("tensor is already normalized".into()));
    }
    if intrinsics.len() != tensor.num_cameras() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} intrinsic matrices", tensor.num_cameras()),
            got: format!("{}", intrinsics.len()),
        });
    }
    let inverses = invert_intrinsics(intrinsics)?;
    let observations = tensor
        .observations()
        .iter()
        .map(|o| Observation {
            camera: o.camera,
            track: o.track,
            position: apply_homogeneous(&inverses[o.camera], o.position),
        })
        .collect();
    TrackTensor::new(
        tensor.num_cameras(),
        tensor.num_tracks(),
        observations,
        true,
        Some(intrinsics.to_vec()),
    )
}

/// Pixel-space inverse of [`normalize_tracks`].
pub fn denormalize_tracks(tensor: &TrackTensor) -> Result<TrackTensor> {
    if !tensor.normalized() {
        return Err(SfmError::NotNormalized);
    }
    let ks = tensor.intrinsics().ok_or(SfmError::MissingIntrinsics)?;
    let observations = tensor
        .observations()
        .iter()
        .map(|o| Observation {
            camera: o.camera,
            track: o.track,
            position: apply_homogeneous(&ks[o.camera], o.position),
        })
        .collect();
    TrackTensor::new(tensor.num_cameras(), tensor.num_tracks(), observations, false, None)
}

/// Pixel distance between two normalized-coordinate points under a
/// calibration matrix (exactly focal * normalized distance for the usual
/// diagonal calibration).
pub fn pixel_distance(k: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let pa = apply_homogeneous(k, a);
    let pb = apply_homogeneous(k, b);
    ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
}

/// Label observations as inliers/outliers against a reference
/// reconstruction (reference tracks plus reference camera poses).
///
/// The five steps: (1) mark an observation as an outlier when the same
/// keypoint does not appear in the corresponding reference track (same
/// cell, same position); (2) drop the marked observations; (3) triangulate
/// each cleaned track with the reference poses; (4) reproject onto all
/// original observations, including the dropped ones; (5) the final label
/// is inlier iff the pixel reprojection error is below `pixel_threshold`.
/// The step-5 check overrides step-1 marks in both directions.
///
/// Tracks correspond by index; both tensors must be normalized with
/// intrinsics retained, and cameras must be indexed identically. A track
/// whose cleaned observation set is too small to triangulate (or is
/// degenerate) has all its observations labeled outlier.
pub fn label_tracks(
    tensor: &TrackTensor,
    reference: &TrackTensor,
    reference_poses: &[CameraPose],
    pixel_threshold: f64,
) -> Result<TrackLabels> {
    if !tensor.normalized() || !reference.normalized() {
        return Err(SfmError::NotNormalized);
    }
    let ks = tensor.intrinsics().ok_or(SfmError::MissingIntrinsics)?;
    if reference_poses.len() < tensor.num_cameras() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} reference poses", tensor.num_cameras()),
            got: format!("{}", reference_poses.len()),
        });
    }

    let mut labels = vec![true; tensor.num_observations()];
    for (track_index, obs_indices) in tensor.track_observations().iter().enumerate() {
        // Step 1+2: keep observations whose keypoint appears in the
        // corresponding reference track.
        let mut clean: Vec<(CameraPose, [f64; 2])> = Vec::new();
        for &i in obs_indices {
            let obs = tensor.observations()[i];
            let in_reference = track_index < reference.num_tracks()
                && reference
                    .find(obs.camera, track_index)
                    .map(|r| reference.observations()[r].position == obs.position)
                    .unwrap_or(false);
            if in_reference {
                clean.push((reference_poses[obs.camera], obs.position));
            }
        }
        // Step 3: triangulate; untriangulatable tracks stay all-outlier.
        if clean.len() < 2 {
            continue;
        }
        let point = match geometry::triangulate(&clean) {
            Ok(p) => p,
            Err(_) => continue,
        };
        // Steps 4+5: reproject onto every original observation.
        for &i in obs_indices {
            let obs = tensor.observations()[i];
            if let Ok((proj, _depth)) = geometry::project(&reference_poses[obs.camera], &point) {
                let err_px = pixel_distance(&ks[obs.camera], proj, obs.position);
                labels[i] = err_px >= pixel_threshold;
            }
        }
    }
    TrackLabels::new(tensor, labels)
}

/// Remove observations whose outlier score is at or above `threshold`
/// (inclusive), then drop tracks that fall below the minimum view count.
/// Camera count and indexing are preserved; surviving tracks are
/// re-indexed in stable order.
pub fn remove_outliers(
    tensor: &TrackTensor,
    scores: &crate::equinet::OutlierScores,
    threshold: f64,
) -> Result<TrackTensor> {
    if scores.len() != tensor.num_observations() {
        return Err(SfmError::ShapeMismatch {
            expected: format!("{} scores", tensor.num_observations()),
            got: format!("{}", scores.len()),
        });
    }
    let keep: Vec<bool> = scores.values().iter().map(|&s| s < threshold).collect();
    let mut views = vec![0usize; tensor.num_tracks()];
    for (i, obs) in tensor.observations().iter().enumerate() {
        if keep[i] {
            views[obs.track] += 1;
        }
    }
    let mut track_map = vec![usize::MAX; tensor.num_tracks()];
    let mut next = 0usize;
    for j in 0..tensor.num_tracks() {
        if views[j] >= MIN_TRACK_VIEWS {
            track_map[j] = next;
            next += 1;
        }
    }
    let observations = tensor
        .observations()
        .iter()
        .enumerate()
        .filter(|(i, o)| keep[*i] && track_map[o.track] != usize::MAX)
        .map(|(_, o)| Observation { camera: o.camera, track: track_map[o.track], position: o.position })
        .collect();
    TrackTensor::new(
        tensor.num_cameras(),
        next,
        observations,
        tensor.normalized(),
        tensor.intrinsics().map(|ks| ks.to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::OutlierScores;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn m(ia: usize, ka: usize, ib: usize, kb: usize) -> Match {
        Match {
            image_a: ia,
            keypoint_a: ka,
            position_a: [ia as f64, ka as f64],
            image_b: ib,
            keypoint_b: kb,
            position_b: [ib as f64, kb as f64],
        }
    }

    #[test]
    fn chain_transitive() {
        let matches = PairwiseMatches::new(vec![m(0, 0, 1, 3), m(1, 3, 2, 7)]).unwrap();
        let t = chain_matches(&matches);
        assert_eq!(t.num_tracks(), 1);
        assert_eq!(t.num_observations(), 3);
        assert_eq!(t.num_cameras(), 3);
    }

    #[test]
    fn chain_inconsistent_cycle_discarded() {
        let matches = PairwiseMatches::new(vec![m(0, 0, 1, 3), m(1, 3, 0, 5)]).unwrap();
        let t = chain_matches(&matches);
        assert_eq!(t.num_tracks(), 0);
        assert!(t.is_empty());
    }

    #[test]
    fn chain_two_view_track_discarded() {
        let matches = PairwiseMatches::new(vec![m(0, 0, 1, 3)]).unwrap();
        let t = chain_matches(&matches);
        assert_eq!(t.num_tracks(), 0);
    }

    #[test]
    fn chain_matches_brute_force_oracle() {
        // Oracle: repeatedly merge overlapping keypoint sets until fixpoint,
        // then apply the same discard rules.
        fn oracle(matches: &PairwiseMatches) -> Vec<Vec<(usize, usize)>> {
            let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
            for mt in matches.matches() {
                groups.push(vec![(mt.image_a, mt.keypoint_a), (mt.image_b, mt.keypoint_b)]);
            }
            loop {
                let mut merged = false;
                'outer: for i in 0..groups.len() {
                    for j in i + 1..groups.len() {
                        if groups[i].iter().any(|k| groups[j].contains(k)) {
                            let g = groups.swap_remove(j);
                            groups[i].extend(g);
                            groups[i].sort_unstable();
                            groups[i].dedup();
                            merged = true;
                            break 'outer;
                        }
                    }
                }
                if !merged {
                    break;
                }
            }
            for g in groups.iter_mut() {
                g.sort_unstable();
                g.dedup();
            }
            groups.retain(|g| {
                let mut images: Vec<usize> = g.iter().map(|k| k.0).collect();
                images.sort_unstable();
                let total = images.len();
                images.dedup();
                images.len() == total && images.len() >= MIN_TRACK_VIEWS
            });
            groups
        }

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..60 {
            let n_matches = rng.random_range(1..=50);
            let mut ms = Vec::new();
            for _ in 0..n_matches {
                let ia = rng.random_range(0..6);
                let mut ib = rng.random_range(0..6);
                while ib == ia {
                    ib = rng.random_range(0..6);
                }
                ms.push(m(ia, rng.random_range(0..4), ib, rng.random_range(0..4)));
            }
            let matches = PairwiseMatches::new(ms).unwrap();
            let tensor = chain_matches(&matches);
            let mut expected = oracle(&matches);

            let mut got: Vec<Vec<(usize, usize)>> = tensor
                .track_observations()
                .iter()
                .map(|idxs| {
                    let mut keys: Vec<(usize, usize)> = idxs
                        .iter()
                        .map(|&i| {
                            let o = tensor.observations()[i];
                            // Keypoint id was encoded into the position.
                            (o.camera, o.position[1] as usize)
                        })
                        .collect();
                    keys.sort_unstable();
                    keys
                })
                .collect();
            got.sort();
            expected.sort();
            assert_eq!(got, expected);
        }
    }

    fn k(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    fn three_view_tensor(positions: [[f64; 2]; 3], normalized: bool, ks: Option<Vec<Matrix3<f64>>>) -> TrackTensor {
        let obs = positions
            .iter()
            .enumerate()
            .map(|(i, &p)| Observation { camera: i, track: 0, position: p })
            .collect();
        TrackTensor::new(3, 1, obs, normalized, ks).unwrap()
    }

    #[test]
    fn normalize_identity_calibration() {
        let t = three_view_tensor([[0.3, -0.2], [1.0, 2.0], [-0.5, 0.25]], false, None);
        let ks = vec![k(1.0, 0.0, 0.0); 3];
        let n = normalize_tracks(&t, &ks).unwrap();
        for (a, b) in n.observations().iter().zip(t.observations()) {
            assert_eq!(a.position, b.position);
        }
        assert!(n.normalized());
    }

    #[test]
    fn normalize_principal_point_and_focal() {
        let t = three_view_tensor([[50.0, 50.0], [150.0, 50.0], [50.0, 150.0]], false, None);
        let ks = vec![k(100.0, 50.0, 50.0); 3];
        let n = normalize_tracks(&t, &ks).unwrap();
        assert_eq!(n.observations()[0].position, [0.0, 0.0]);
        assert_eq!(n.observations()[1].position, [1.0, 0.0]);
        assert_eq!(n.observations()[2].position, [0.0, 1.0]);
    }

    #[test]
    fn normalize_singular_intrinsics_rejected() {
        let t = three_view_tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], false, None);
        let mut ks = vec![k(100.0, 50.0, 50.0); 3];
        ks[1][(0, 0)] = 0.0;
        ks[1][(1, 1)] = 0.0;
        assert!(matches!(normalize_tracks(&t, &ks), Err(SfmError::SingularIntrinsics(1))));
    }

    #[test]
    fn normalize_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = Vec::new();
        for track in 0..10 {
            for camera in 0..4 {
                obs.push(Observation {
                    camera,
                    track,
                    position: [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)],
                });
            }
        }
        let t = TrackTensor::new(4, 10, obs, false, None).unwrap();
        let ks: Vec<Matrix3<f64>> =
            (0..4).map(|i| k(800.0 + 50.0 * i as f64, 320.0, 240.0)).collect();
        let n = normalize_tracks(&t, &ks).unwrap();
        let back = denormalize_tracks(&n).unwrap();
        for (a, b) in back.observations().iter().zip(t.observations()) {
            assert!((a.position[0] - b.position[0]).abs() < 1e-9);
            assert!((a.position[1] - b.position[1]).abs() < 1e-9);
        }
    }

    /// Reference scene for labeling tests: three cameras looking down the
    /// z axis from different x offsets, one track at the origin-ish point.
    fn labeling_fixture() -> (Vec<CameraPose>, Vec<Matrix3<f64>>, Vector3<f64>) {
        let poses: Vec<CameraPose> = (0..3)
            .map(|i| {
                CameraPose::from_rt(Matrix3::identity(), Vector3::new(-0.4 * i as f64, 0.0, 2.0))
            })
            .collect();
        let ks = vec![k(1000.0, 320.0, 240.0); 3];
        (poses, ks, Vector3::new(0.1, -0.05, 1.0))
    }

    fn project_norm(pose: &CameraPose, p: &Vector3<f64>) -> [f64; 2] {
        geometry::project(pose, p).unwrap().0
    }

    #[test]
    fn label_present_and_exact_is_inlier() {
        let (poses, ks, point) = labeling_fixture();
        let positions: Vec<[f64; 2]> = poses.iter().map(|p| project_norm(p, &point)).collect();
        let t = three_view_tensor([positions[0], positions[1], positions[2]], true, Some(ks));
        let labels = label_tracks(&t, &t.clone(), &poses, LABEL_PIXEL_THRESHOLD).unwrap();
        assert_eq!(labels.as_slice(), &[false, false, false]);
    }

    #[test]
    fn label_absent_with_large_error_is_outlier() {
        let (poses, ks, point) = labeling_fixture();
        let mut positions: Vec<[f64; 2]> = poses.iter().map(|p| project_norm(p, &point)).collect();
        // Reference track holds the exact projections.
        let reference = three_view_tensor(
            [positions[0], positions[1], positions[2]],
            true,
            Some(ks.clone()),
        );
        // The tested tensor has camera 2 displaced by 10 px (focal 1000).
        positions[2][0] += 10.0 / 1000.0;
        let t = three_view_tensor([positions[0], positions[1], positions[2]], true, Some(ks));
        let labels = label_tracks(&t, &reference, &poses, LABEL_PIXEL_THRESHOLD).unwrap();
        assert_eq!(labels.as_slice(), &[false, false, true]);
    }

    #[test]
    fn label_absent_with_small_error_is_inlier() {
        // Step 5 overrides step 1: a keypoint missing from the reference
        // track but reprojecting within 4 px is an inlier.
        let (poses, ks, point) = labeling_fixture();
        let mut positions: Vec<[f64; 2]> = poses.iter().map(|p| project_norm(p, &point)).collect();
        let reference = three_view_tensor(
            [positions[0], positions[1], positions[2]],
            true,
            Some(ks.clone()),
        );
        positions[2][0] += 1.0 / 1000.0; // 1 px off: absent from reference, small error
        let t = three_view_tensor([positions[0], positions[1], positions[2]], true, Some(ks));
        let labels = label_tracks(&t, &reference, &poses, LABEL_PIXEL_THRESHOLD).unwrap();
        assert_eq!(labels.as_slice(), &[false, false, false]);
    }

    #[test]
    fn label_untriangulatable_track_all_outlier() {
        let (poses, ks, point) = labeling_fixture();
        let positions: Vec<[f64; 2]> = poses.iter().map(|p| project_norm(p, &point)).collect();
        let t = three_view_tensor(
            [positions[0], positions[1], positions[2]],
            true,
            Some(ks.clone()),
        );
        // Reference shares only one keypoint: one clean observation is not
        // enough to triangulate.
        let mut ref_positions = positions.clone();
        ref_positions[1][0] += 0.5;
        ref_positions[2][0] += 0.5;
        let reference =
            three_view_tensor([ref_positions[0], ref_positions[1], ref_positions[2]], true, Some(ks));
        let labels = label_tracks(&t, &reference, &poses, LABEL_PIXEL_THRESHOLD).unwrap();
        assert_eq!(labels.as_slice(), &[true, true, true]);
    }

    fn scored_tensor() -> TrackTensor {
        let mut obs = Vec::new();
        for track in 0..2 {
            for camera in 0..3 {
                obs.push(Observation {
                    camera,
                    track,
                    position: [camera as f64, track as f64],
                });
            }
        }
        TrackTensor::new(3, 2, obs, false, None).unwrap()
    }

    #[test]
    fn remove_outliers_threshold_is_inclusive() {
        let t = scored_tensor();
        // Track 0 keeps 3 views; track 1 loses one observation at exactly
        // the threshold and drops below the minimum view count entirely.
        let mut values = vec![0.0; 6];
        values[t.find(1, 1).unwrap()] = 0.6;
        let scores = OutlierScores::new(&t, values).unwrap();
        let filtered = remove_outliers(&t, &scores, 0.6).unwrap();
        assert_eq!(filtered.num_tracks(), 1);
        assert_eq!(filtered.num_observations(), 3);
    }

    #[test]
    fn remove_outliers_all_zero_is_identity() {
        let t = scored_tensor();
        let scores = OutlierScores::new(&t, vec![0.0; 6]).unwrap();
        let filtered = remove_outliers(&t, &scores, 0.6).unwrap();
        assert_eq!(filtered, t);
    }

    #[test]
    fn remove_outliers_drops_whole_track_below_min_views() {
        let t = scored_tensor();
        let mut values = vec![0.0; 6];
        values[t.find(0, 0).unwrap()] = 0.9;
        let scores = OutlierScores::new(&t, values).unwrap();
        let filtered = remove_outliers(&t, &scores, 0.6).unwrap();
        assert_eq!(filtered.num_tracks(), 1);
        // The surviving track is old track 1, re-indexed to 0.
        assert!(filtered.observations().iter().all(|o| o.track == 0));
        assert_eq!(filtered.observations()[0].position[1], 1.0);
    }

    #[test]
    fn remove_outliers_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut obs = Vec::new();
        for track in 0..12 {
            for camera in 0..5 {
                obs.push(Observation {
                    camera,
                    track,
                    position: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                });
            }
        }
        let t = TrackTensor::new(5, 12, obs, false, None).unwrap();
        let values: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let scores = OutlierScores::new(&t, values.clone()).unwrap();
        let once = remove_outliers(&t, &scores, 0.6).unwrap();
        // Scores for the surviving observations, re-aligned.
        let surviving: Vec<f64> = t
            .observations()
            .iter()
            .zip(&values)
            .filter(|(o, &s)| {
                s < 0.6 && once.observations().iter().any(|p| {
                    p.camera == o.camera && p.position == o.position
                })
            })
            .map(|(_, &s)| s)
            .collect();
        let scores2 = OutlierScores::new(&once, surviving).unwrap();
        let twice = remove_outliers(&once, &scores2, 0.6).unwrap();
        assert_eq!(once.num_tracks(), twice.num_tracks());
        assert_eq!(once.num_observations(), twice.num_observations());
    }

    #[test]
    fn restrict_cameras_enforces_min_views() {
        let t = scored_tensor();
        let r = t.restrict_cameras(&[0, 1]).unwrap();
        // Only two cameras selected: no track can reach three views.
        assert_eq!(r.tensor.num_tracks(), 0);
        assert!(r.cameras.is_empty());
        assert!(r.tracks.is_empty());
        assert!(r.observation_indices.is_empty());
        let r = t.restrict_cameras(&[0, 1, 2]).unwrap();
        assert_eq!(r.tensor.num_tracks(), 2);
        assert_eq!(r.cameras, vec![0, 1, 2]);
        assert_eq!(r.tracks, vec![0, 1]);
        assert_eq!(r.observation_indices, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_rejects_short_tracks() {
        let obs = vec![
            Observation { camera: 0, track: 0, position: [0.0, 0.0] },
            Observation { camera: 1, track: 0, position: [1.0, 0.0] },
        ];
        assert!(TrackTensor::new(2, 1, obs, false, None).is_err());
    }

    #[test]
    fn tensor_storage_order_is_canonical() {
        let a = vec![
            Observation { camera: 2, track: 0, position: [2.0, 0.0] },
            Observation { camera: 0, track: 0, position: [0.0, 0.0] },
            Observation { camera: 1, track: 0, position: [1.0, 0.0] },
        ];
        let mut b = a.clone();
        b.reverse();
        let ta = TrackTensor::new(3, 1, a, false, None).unwrap();
        let tb = TrackTensor::new(3, 1, b, false, None).unwrap();
        assert_eq!(ta, tb);
    }
}
