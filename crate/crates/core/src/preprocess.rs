// SPDX-License-Identifier: Apache-2.0

//! Range cropping, statistical outlier removal and voxel-grid downsampling.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud_io::{Point3, PointCloud, Rgb};
use crate::clustering::SpatialIndex;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("range bounds must satisfy 0 <= min < max, got [{0}, {1}]")]
    Range(f64, f64),
    #[error("outlier_k must be at least 1")]
    OutlierK,
    #[error("outlier_std_ratio must be positive, got {0}")]
    StdRatio(f64),
    #[error("voxel_size must be positive, got {0}")]
    VoxelSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Radial distance from the sensor origin, meters.
    pub min_range: f64,
    pub max_range: f64,
    pub outlier_k: usize,
    pub outlier_std_ratio: f64,
    /// Voxel edge, meters.
    pub voxel_size: f64,
}

impl PreprocessConfig {
    pub fn indoor() -> Self {
        Self {
            min_range: 0.15,
            max_range: 0.45,
            outlier_k: 20,
            outlier_std_ratio: 2.0,
            voxel_size: 0.005,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            min_range: 0.4,
            max_range: 1.8,
            outlier_k: 20,
            outlier_std_ratio: 2.0,
            voxel_size: 0.010,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.min_range >= 0.0 && self.min_range < self.max_range && self.max_range.is_finite()) {
            return Err(PreprocessError::Range(self.min_range, self.max_range));
        }
        if self.outlier_k == 0 {
            return Err(PreprocessError::OutlierK);
        }
        if !(self.outlier_std_ratio > 0.0 && self.outlier_std_ratio.is_finite()) {
            return Err(PreprocessError::StdRatio(self.outlier_std_ratio));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(PreprocessError::VoxelSize(self.voxel_size));
        }
        Ok(())
    }
}

/// Keeps points with `min_range <= |p| <= max_range`, in order.
pub fn crop_by_distance(cloud: &PointCloud, min_range: f64, max_range: f64) -> PointCloud {
    cloud.retain_by(|_, p| {
        let r = p.coords.norm();
        r >= min_range && r <= max_range
    })
}

/// Mean distance from each point to its `k` nearest neighbors (self excluded).
pub fn mean_knn_distances(points: &[Point3], k: usize) -> Vec<f64> {
    let index = SpatialIndex::build(points);
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.k_nearest(p, k, Some(i));
            nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Drops points whose mean k-NN distance exceeds `mean + std_ratio * std`
/// of that statistic over the whole cloud.
///
/// Clouds with `k` or fewer points come back unchanged, as do clouds whose
/// statistic has (numerically) zero spread.
pub fn remove_statistical_outliers(cloud: &PointCloud, k: usize, std_ratio: f64) -> PointCloud {
    let n = cloud.len();
    if k == 0 || n <= k {
        return cloud.clone();
    }
    let dists = mean_knn_distances(cloud.points(), k);
    let mean = dists.iter().sum::<f64>() / n as f64;
    let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    if std <= 1e-9 * mean {
        return cloud.clone();
    }
    let threshold = mean + std_ratio * std;
    cloud.retain_by(|i, _| dists[i] <= threshold)
}

/// Integer voxel coordinates of `p`, grid anchored at the sensor origin.
pub fn voxel_key(p: &Point3, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Replaces the points of each occupied voxel with their centroid.
///
/// Output follows the order in which voxels are first visited. Colors are
/// averaged per voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    struct Acc {
        sum: [f64; 3],
        rgb: [u64; 3],
        n: u32,
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut accs: Vec<Acc> = Vec::new();
    let colors = cloud.colors();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = voxel_key(p, voxel_size);
        let slot = *slots.entry(key).or_insert_with(|| {
            accs.push(Acc {
                sum: [0.0; 3],
                rgb: [0; 3],
                n: 0,
            });
            accs.len() - 1
        });
        let acc = &mut accs[slot];
        acc.sum[0] += p.x;
        acc.sum[1] += p.y;
        acc.sum[2] += p.z;
        if let Some(c) = colors {
            for (sum, v) in acc.rgb.iter_mut().zip(c[i]) {
                *sum += u64::from(v);
            }
        }
        acc.n += 1;
    }
    let points: Vec<Point3> = accs
        .iter()
        .map(|a| {
            let n = f64::from(a.n);
            Point3::new(a.sum[0] / n, a.sum[1] / n, a.sum[2] / n)
        })
        .collect();
    let out_colors: Option<Vec<Rgb>> = colors.map(|_| {
        accs.iter()
            .map(|a| {
                let n = u64::from(a.n);
                [
                    ((a.rgb[0] + n / 2) / n) as u8,
                    ((a.rgb[1] + n / 2) / n) as u8,
                    ((a.rgb[2] + n / 2) / n) as u8,
                ]
            })
            .collect()
    });
    PointCloud::from_parts(points, out_colors, cloud.frame_id().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::indoor().validate().is_ok());
        assert!(PreprocessConfig::outdoor().validate().is_ok());
        let mut c = PreprocessConfig::indoor();
        c.min_range = 0.5;
        assert_eq!(c.validate(), Err(PreprocessError::Range(0.5, 0.45)));
        let mut c = PreprocessConfig::indoor();
        c.voxel_size = 0.0;
        assert_eq!(c.validate(), Err(PreprocessError::VoxelSize(0.0)));
    }

    #[test]
    fn crop_keeps_points_inside_band() {
        let dir = nalgebra::Vector3::new(1.0, 2.0, 2.0).normalize();
        let pts: Vec<Point3> = (0..5).map(|_| Point3::from(dir * 0.25)).collect();
        let c = cloud(pts);
        assert_eq!(crop_by_distance(&c, 0.2, 0.3), c);
    }

    #[test]
    fn crop_drops_far_point() {
        let c = cloud(vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, 0.25)]);
        let out = crop_by_distance(&c, 0.2, 0.3);
        assert_eq!(out.points(), &[Point3::new(0.0, 0.0, 0.25)]);
    }

    #[test]
    fn crop_matches_norm_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Point3> = (0..10)
            .map(|_| {
                let dir = nalgebra::Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.1..1.0),
                )
                .normalize();
                Point3::from(dir * rng.random_range(0.15..0.35))
            })
            .collect();
        let c = cloud(pts.clone());
        let expected: Vec<Point3> = pts
            .into_iter()
            .filter(|p| {
                let r = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
                (0.2..=0.3).contains(&r)
            })
            .collect();
        let out = crop_by_distance(&c, 0.2, 0.3);
        assert!(!expected.is_empty() && expected.len() < 10);
        assert_eq!(out.points(), expected.as_slice());
        assert_eq!(crop_by_distance(&out, 0.2, 0.3), out);
    }

    #[test]
    fn lone_outlier_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.001).unwrap();
        let mut pts: Vec<Point3> = (0..100)
            .map(|_| {
                Point3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    0.25 + normal.sample(&mut rng),
                )
            })
            .collect();
        pts.push(Point3::new(0.5, 0.0, 0.25));
        let c = cloud(pts.clone());
        let out = remove_statistical_outliers(&c, 10, 2.0);
        assert!(!out.points().contains(&pts[100]));
        assert_eq!(out.points(), &pts[..100]);
    }

    #[test]
    fn tiny_cloud_unchanged() {
        let c = cloud(vec![
            Point3::origin(),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(0.0, 0.1, 0.0),
        ]);
        assert_eq!(remove_statistical_outliers(&c, 3, 2.0), c);
        assert_eq!(remove_statistical_outliers(&c, 5, 2.0), c);
    }

    #[test]
    fn uniform_grid_keeps_everything() {
        // With k = 3 every grid node, corners included, sees three neighbors
        // at exactly one spacing, so the statistic has no spread.
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    pts.push(Point3::new(
                        i as f64 * 0.005,
                        j as f64 * 0.005,
                        0.2 + k as f64 * 0.005,
                    ));
                }
            }
        }
        let c = cloud(pts);
        assert_eq!(remove_statistical_outliers(&c, 3, 2.0).len(), c.len());
    }

    #[test]
    fn pair_in_one_voxel_collapses_to_midpoint() {
        let c = cloud(vec![
            Point3::new(0.001, 0.001, 0.001),
            Point3::new(0.003, 0.002, 0.004),
        ]);
        let out = voxel_downsample(&c, 0.005);
        assert_eq!(out.len(), 1);
        assert!((out.points()[0] - Point3::new(0.002, 0.0015, 0.0025)).norm() < 1e-15);
    }

    #[test]
    fn sparse_grid_is_unchanged() {
        let pts: Vec<Point3> = (0..20)
            .map(|i| Point3::new(0.0125 + 0.02 * i as f64, 0.0125, 0.2125))
            .collect();
        let c = cloud(pts);
        assert_eq!(voxel_downsample(&c, 0.005), c);
    }

    #[test]
    fn voxel_centroids_match_binning_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..10_000)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.2..0.3),
                )
            })
            .collect();
        let c = cloud(pts.clone());
        let vs = 0.005;
        let out = voxel_downsample(&c, vs);

        // Independent binning via a sorted map keyed on floor division.
        let mut bins: std::collections::BTreeMap<(i64, i64, i64), Vec<Point3>> = Default::default();
        for p in &pts {
            let key = (
                (p.x / vs).floor() as i64,
                (p.y / vs).floor() as i64,
                (p.z / vs).floor() as i64,
            );
            bins.entry(key).or_default().push(*p);
        }
        assert_eq!(out.len(), bins.len());
        let half_diag = vs * 3f64.sqrt() / 2.0;
        for q in out.points() {
            let key = (
                (q.x / vs).floor() as i64,
                (q.y / vs).floor() as i64,
                (q.z / vs).floor() as i64,
            );
            let members = &bins[&key];
            let centroid = members
                .iter()
                .fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords)
                / members.len() as f64;
            assert!((q.coords - centroid).norm() < 1e-12);
            assert!(members.iter().any(|p| (p - q).norm() <= half_diag + 1e-12));
            let nearest = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(nearest <= half_diag + 1e-12);
        }
        assert_eq!(voxel_downsample(&out, vs).len(), out.len());
    }

    #[test]
    fn voxel_colors_are_averaged() {
        let c = PointCloud::with_colors(
            vec![Point3::new(0.001, 0.001, 0.001), Point3::new(0.002, 0.002, 0.002)],
            vec![[10, 20, 30], [20, 40, 60]],
        )
        .unwrap();
        assert_eq!(voxel_downsample(&c, 0.005).colors(), Some(&[[15, 30, 45]][..]));
    }
}
