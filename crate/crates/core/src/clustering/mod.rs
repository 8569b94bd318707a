// SPDX-License-Identifier: Apache-2.0

//! kd-tree spatial index and DBSCAN.
//!
//! Neighborhoods are closed balls (`|p - q| <= eps`) and include the query
//! point itself. A point is *core* when its neighborhood holds at least
//! `min_points` points. Clusters are seeded from core points in ascending
//! index order, so a border point reachable from several clusters joins the
//! one whose lowest-index core point comes first.

mod kdtree;

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud_io::{Point3, PointCloud};

pub use kdtree::SpatialIndex;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("eps must be positive and finite, got {0}")]
    Eps(f64),
    #[error("min_points must be at least 1")]
    MinPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringParams {
    /// Neighborhood radius, meters.
    pub eps: f64,
    pub min_points: usize,
}

impl ClusteringParams {
    pub fn new(eps: f64, min_points: usize) -> Result<Self, ClusteringError> {
        let p = Self { eps, min_points };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ClusteringError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ClusteringError::Eps(self.eps));
        }
        if self.min_points == 0 {
            return Err(ClusteringError::MinPoints);
        }
        Ok(())
    }

    /// Camera 0.2-0.3 m from the canopy, 5 mm voxels.
    pub fn indoor() -> Self {
        Self {
            eps: 0.008,
            min_points: 6,
        }
    }

    /// Camera 0.5-1.6 m from the canopy, 10 mm voxels.
    pub fn outdoor() -> Self {
        Self {
            eps: 0.020,
            min_points: 4,
        }
    }
}

/// Per-point cluster assignment; `None` is noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    labels: Vec<Option<u32>>,
    core: Vec<bool>,
    n_clusters: usize,
}

impl ClusterLabels {
    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn is_core(&self, i: usize) -> bool {
        self.core[i]
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Member indices of each cluster, ascending, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c as usize].push(i);
            }
        }
        out
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::build(cloud.points())
}

pub fn radius_neighbors(index: &SpatialIndex, q: &Point3, r: f64) -> Vec<usize> {
    index.radius_neighbors(q, r)
}

pub fn dbscan(cloud: &PointCloud, params: &ClusteringParams) -> ClusterLabels {
    dbscan_points(cloud.points(), params)
}

pub fn dbscan_points(points: &[Point3], params: &ClusteringParams) -> ClusterLabels {
    let n = points.len();
    let index = SpatialIndex::build(points);
    let core: Vec<bool> = points
        .par_iter()
        .map(|p| index.count_within(p, params.eps) >= params.min_points)
        .collect();

    let mut labels: Vec<Option<u32>> = vec![None; n];
    let mut next_id: u32 = 0;
    let mut queue = VecDeque::new();
    let mut neighbors = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        let id = next_id;
        next_id += 1;
        labels[seed] = Some(id);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            index.radius_neighbors_into(&points[p], params.eps, &mut neighbors);
            for &q in &neighbors {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    ClusterLabels {
        labels,
        core,
        n_clusters: next_id as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut ChaCha8Rng, center: [f64; 3], n: usize, spread: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    center[0] + rng.random_range(-spread..spread),
                    center[1] + rng.random_range(-spread..spread),
                    center[2] + rng.random_range(-spread..spread),
                )
            })
            .collect()
    }

    #[test]
    fn rejects_bad_params() {
        assert_eq!(ClusteringParams::new(0.0, 3), Err(ClusteringError::Eps(0.0)));
        assert_eq!(ClusteringParams::new(0.1, 0), Err(ClusteringError::MinPoints));
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = blob(&mut rng, [0.0, 0.0, 0.0], 50, 0.01);
        pts.extend(blob(&mut rng, [1.0, 0.0, 0.0], 50, 0.01));
        let labels = dbscan_points(&pts, &ClusteringParams::new(0.05, 5).unwrap());
        assert_eq!(labels.n_clusters(), 2);
        assert_eq!(labels.n_noise(), 0);
        assert!(labels.labels()[..50].iter().all(|l| *l == Some(0)));
        assert!(labels.labels()[50..].iter().all(|l| *l == Some(1)));
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![Point3::new(0.2, 0.2, 0.2); 10];
        let labels = dbscan_points(&pts, &ClusteringParams::new(0.01, 10).unwrap());
        assert_eq!(labels.n_clusters(), 1);
        assert_eq!(labels.n_noise(), 0);
    }

    #[test]
    fn isolated_point_is_noise() {
        let labels = dbscan_points(&[Point3::origin()], &ClusteringParams::new(0.1, 2).unwrap());
        assert_eq!(labels.labels(), &[None]);
    }

    #[test]
    fn min_points_one_leaves_no_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = blob(&mut rng, [0.0; 3], 80, 1.0);
        let labels = dbscan_points(&pts, &ClusteringParams::new(0.05, 1).unwrap());
        assert_eq!(labels.n_noise(), 0);
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // Two dense columns 2 apart, one border point equidistant between them.
        let mut pts = Vec::new();
        for x in [0.0, 2.0] {
            for i in 0..5 {
                pts.push(Point3::new(x, i as f64 * 0.1, 0.0));
            }
        }
        pts.push(Point3::new(1.0, 0.0, 0.0));
        let labels = dbscan_points(&pts, &ClusteringParams::new(1.0, 4).unwrap());
        assert_eq!(labels.n_clusters(), 2);
        assert!(!labels.is_core(10));
        assert_eq!(labels.labels()[10], Some(0));
    }
}
