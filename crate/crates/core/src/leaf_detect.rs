// SPDX-License-Identifier: Apache-2.0

//! Cluster description and leaf filtering.
//!
//! Each DBSCAN cluster is summarized by a PCA oriented bounding box. The box
//! axes are ordered so that `h >= w >= d`; the `h` and `d` axes are signed to
//! point along the sensor `+z` half-space and `w = d x h` completes a
//! right-handed frame. The remaining ambiguity is a half-turn about `d`,
//! which is the tip/stem symmetry that PCA cannot resolve.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud_io::{Point3, PointCloud, Pose6D};
use crate::clustering::{dbscan, ClusteringParams};
use crate::preprocess::{crop_by_distance, remove_statistical_outliers, voxel_downsample, PreprocessConfig};

pub const CANDIDATES_SCHEMA: &str = "leafcut/candidates/v1";

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("cannot fit a bounding box to an empty point set")]
    EmptyInput,
    #[error("invalid filter config: {0}")]
    Filter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBoundingBox {
    /// Box center in the sensor frame, meters.
    pub center: Vector3<f64>,
    /// Extents `[h, w, d]`, meters, sorted descending.
    pub dims: [f64; 3],
    /// Maps box axes (h, w, d) into the sensor frame.
    pub rotation: UnitQuaternion<f64>,
}

impl OrientedBoundingBox {
    pub fn axes(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// `h / w`; infinite or NaN for a box with zero width.
    pub fn leaf_ratio(&self) -> f64 {
        self.dims[0] / self.dims[1]
    }

    pub fn pose(&self) -> Pose6D {
        Pose6D::new(self.center, self.rotation)
    }

    /// True when `p` lies inside the box grown by `slack` on every face.
    pub fn contains(&self, p: &Point3, slack: f64) -> bool {
        let local = self.axes().transpose() * (p.coords - self.center);
        (0..3).all(|i| local[i].abs() <= self.dims[i] / 2.0 + slack)
    }
}

/// Sign used to orient an axis: `+z` first, then `+x`, then `+y`.
fn orientation_sign(v: &Vector3<f64>) -> f64 {
    const TIE: f64 = 1e-9;
    for c in [v.z, v.x, v.y] {
        if c.abs() > TIE {
            return c.signum();
        }
    }
    1.0
}

/// PCA oriented bounding box of a point set.
pub fn fit_obb(points: &[Point3]) -> Result<OrientedBoundingBox, DetectError> {
    let n = points.len();
    if n == 0 {
        return Err(DetectError::EmptyInput);
    }
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n as f64;
    if n == 1 {
        return Ok(OrientedBoundingBox {
            center: points[0].coords,
            dims: [0.0; 3],
            rotation: UnitQuaternion::identity(),
        });
    }
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let pcs: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).normalize())
        .collect();

    let extent = |axis: &Vector3<f64>| {
        points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let s = (p.coords - mean).dot(axis);
                (lo.min(s), hi.max(s))
            })
    };
    let mut by_extent: Vec<(Vector3<f64>, f64)> = pcs
        .iter()
        .map(|a| {
            let (lo, hi) = extent(a);
            (*a, hi - lo)
        })
        .collect();
    // Stable: equal extents keep eigenvalue order.
    by_extent.sort_by(|a, b| b.1.total_cmp(&a.1));

    let h = by_extent[0].0 * orientation_sign(&by_extent[0].0);
    let d = by_extent[2].0 * orientation_sign(&by_extent[2].0);
    let w = d.cross(&h).normalize();
    let axes = Matrix3::from_columns(&[h, w, d]);

    let mut dims = [0.0; 3];
    let mut mid = Vector3::zeros();
    for (i, dim) in dims.iter_mut().enumerate() {
        let axis = axes.column(i).into_owned();
        let (lo, hi) = extent(&axis);
        *dim = hi - lo;
        mid += axis * ((lo + hi) / 2.0);
    }
    let pose = Pose6D::from_axes(mean + mid, &axes);
    Ok(OrientedBoundingBox {
        center: pose.translation,
        dims,
        rotation: pose.rotation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafFilterConfig {
    /// Minimum points in a (downsampled) cluster.
    pub min_cluster_points: usize,
    /// Inclusive volume bounds, cubic meters.
    pub volume_range: [f64; 2],
    /// Inclusive bounds on `h / w`.
    pub ratio_range: [f64; 2],
}

impl Default for LeafFilterConfig {
    fn default() -> Self {
        Self {
            min_cluster_points: 30,
            volume_range: [2e-6, 2e-4],
            ratio_range: [1.0, 4.0],
        }
    }
}

impl LeafFilterConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.volume_range) {
            return Err(DetectError::Filter(format!(
                "volume_range {:?} must be positive and ordered",
                self.volume_range
            )));
        }
        if !ordered(self.ratio_range) {
            return Err(DetectError::Filter(format!(
                "ratio_range {:?} must be positive and ordered",
                self.ratio_range
            )));
        }
        Ok(())
    }
}

/// Accepts a cluster when its point count, box volume and leaf ratio all fall
/// inside the configured bounds. Non-finite ratios (zero width) are rejected.
pub fn geometric_filter(n_points: usize, volume: f64, leaf_ratio: f64, cfg: &LeafFilterConfig) -> bool {
    n_points >= cfg.min_cluster_points
        && volume >= cfg.volume_range[0]
        && volume <= cfg.volume_range[1]
        && leaf_ratio.is_finite()
        && leaf_ratio >= cfg.ratio_range[0]
        && leaf_ratio <= cfg.ratio_range[1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafCandidate {
    pub obb: OrientedBoundingBox,
    pub pose: Pose6D,
    pub n_points: usize,
    pub volume: f64,
    pub leaf_ratio: f64,
    /// Position in the retrieval queue, 0 = nearest.
    pub rank: usize,
}

impl LeafCandidate {
    pub fn from_obb(obb: OrientedBoundingBox, n_points: usize) -> Self {
        Self {
            pose: obb.pose(),
            volume: obb.volume(),
            leaf_ratio: obb.leaf_ratio(),
            obb,
            n_points,
            rank: 0,
        }
    }

    /// Distance from the sensor origin to the box center.
    pub fn range(&self) -> f64 {
        self.obb.center.norm()
    }
}

/// Point counts after each pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub cropped: usize,
    pub inliers: usize,
    pub downsampled: usize,
    pub clusters: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub crop: Duration,
    pub outliers: Duration,
    pub downsample: Duration,
    pub cluster: Duration,
    pub describe: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.crop + self.outliers + self.downsample + self.cluster + self.describe
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub candidates: Vec<LeafCandidate>,
    pub counts: StageCounts,
    pub timings: StageTimings,
}

/// Full perception pipeline; returns candidates ranked nearest first.
pub fn detect_leaves(
    cloud: &PointCloud,
    pre: &PreprocessConfig,
    clus: &ClusteringParams,
    filt: &LeafFilterConfig,
) -> Vec<LeafCandidate> {
    detect_leaves_detailed(cloud, pre, clus, filt).candidates
}

pub fn detect_leaves_detailed(
    cloud: &PointCloud,
    pre: &PreprocessConfig,
    clus: &ClusteringParams,
    filt: &LeafFilterConfig,
) -> Detection {
    let mut counts = StageCounts {
        input: cloud.len(),
        ..Default::default()
    };
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let cropped = crop_by_distance(cloud, pre.min_range, pre.max_range);
    timings.crop = t.elapsed();
    counts.cropped = cropped.len();

    let t = Instant::now();
    let inliers = remove_statistical_outliers(&cropped, pre.outlier_k, pre.outlier_std_ratio);
    timings.outliers = t.elapsed();
    counts.inliers = inliers.len();

    let t = Instant::now();
    let down = voxel_downsample(&inliers, pre.voxel_size);
    timings.downsample = t.elapsed();
    counts.downsampled = down.len();

    let t = Instant::now();
    let labels = dbscan(&down, clus);
    timings.cluster = t.elapsed();
    counts.clusters = labels.n_clusters();

    let t = Instant::now();
    let clusters = labels.clusters();
    let described: Vec<Option<LeafCandidate>> = clusters
        .par_iter()
        .map(|members| {
            let pts: Vec<Point3> = members.iter().map(|&i| down.points()[i]).collect();
            let obb = fit_obb(&pts).ok()?;
            let cand = LeafCandidate::from_obb(obb, pts.len());
            geometric_filter(cand.n_points, cand.volume, cand.leaf_ratio, filt).then_some(cand)
        })
        .collect();
    let candidates = rank_candidates(described.into_iter().flatten().collect());
    timings.describe = t.elapsed();
    counts.candidates = candidates.len();

    Detection {
        candidates,
        counts,
        timings,
    }
}

/// Stable sort by range from the sensor; assigns `rank`.
pub fn rank_candidates(mut candidates: Vec<LeafCandidate>) -> Vec<LeafCandidate> {
    candidates.sort_by(|a, b| a.range().total_cmp(&b.range()));
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = i;
    }
    candidates
}

/// FIFO of candidates, nearest first.
#[derive(Debug, Clone, Default)]
pub struct CandidateQueue {
    items: VecDeque<LeafCandidate>,
}

impl CandidateQueue {
    pub fn new(candidates: Vec<LeafCandidate>) -> Self {
        Self {
            items: rank_candidates(candidates).into(),
        }
    }

    /// Next unattempted candidate; `None` once the queue is drained.
    pub fn pop(&mut self) -> Option<LeafCandidate> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn candidate_queue(candidates: Vec<LeafCandidate>) -> CandidateQueue {
    CandidateQueue::new(candidates)
}

/// One candidate as written to JSON, millimeters and degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub rank: usize,
    pub center_mm: [f64; 3],
    pub dims_mm: [f64; 3],
    /// `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    /// `[theta, phi, alpha]`, Z-Y-X.
    pub euler_deg: [f64; 3],
    pub n_points: usize,
    pub volume_mm3: f64,
    pub ratio: f64,
}

impl From<&LeafCandidate> for CandidateRecord {
    fn from(c: &LeafCandidate) -> Self {
        let (t, p, a) = c.pose.euler_zyx();
        let mm = |v: f64| v * 1e3;
        Self {
            rank: c.rank,
            center_mm: [mm(c.obb.center.x), mm(c.obb.center.y), mm(c.obb.center.z)],
            dims_mm: c.obb.dims.map(mm),
            quaternion: c.pose.quaternion_wxyz(),
            euler_deg: [t.to_degrees(), p.to_degrees(), a.to_degrees()],
            n_points: c.n_points,
            volume_mm3: c.volume * 1e9,
            ratio: c.leaf_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub schema_version: String,
    pub frame_id: String,
    pub stage_counts: StageCounts,
    pub candidates: Vec<CandidateRecord>,
}

impl CandidateSet {
    pub fn new(frame_id: &str, counts: StageCounts, candidates: &[LeafCandidate]) -> Self {
        Self {
            schema_version: CANDIDATES_SCHEMA.to_string(),
            frame_id: frame_id.to_string(),
            stage_counts: counts,
            candidates: candidates.iter().map(CandidateRecord::from).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("candidate records serialize")
    }
}
