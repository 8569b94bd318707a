// SPDX-License-Identifier: Apache-2.0

//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use leafcut::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn within(a: &Point3, b: &Point3, eps: f64) -> bool {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz <= eps * eps
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Brute-force DBSCAN. Core points are linked by union-find over all pairs;
/// clusters are numbered by their lowest core index; a border point takes
/// the lowest-numbered cluster among its core neighbors.
pub fn dbscan_reference(points: &[Point3], eps: f64, min_points: usize) -> Vec<Option<u32>> {
    let n = points.len();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| within(&points[j], &points[i], eps)).collect())
        .collect();
    let core: Vec<bool> = adj.iter().map(|a| a.len() >= min_points).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for &j in &adj[i] {
            if core[i] && core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut id_of_root = vec![None; n];
    let mut next = 0u32;
    let mut labels = vec![None; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let id = *id_of_root[r].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            labels[i] = Some(id);
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = adj[i]
                .iter()
                .filter(|&&j| core[j])
                .filter_map(|&j| labels[j])
                .min();
        }
    }
    labels
}

/// Relabels clusters in order of first appearance so partitions compare
/// independently of cluster numbering.
pub fn canonical(labels: &[Option<u32>]) -> Vec<Option<u32>> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len() as u32;
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Clumpy random cloud on a dyadic grid, so many pair distances tie with
/// `eps` exactly.
pub fn random_cloud(seed: u64) -> (Vec<Point3>, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=500);
    let n_blobs = rng.random_range(1..=6);
    let centers: Vec<[f64; 3]> = (0..n_blobs)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..64) as f64 / 8.0))
        .collect();
    let points = (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                Point3::new(
                    rng.random_range(0..512) as f64 / 64.0,
                    rng.random_range(0..512) as f64 / 64.0,
                    rng.random_range(0..512) as f64 / 64.0,
                )
            } else {
                let c = centers[rng.random_range(0..n_blobs)];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-32..=32) as f64 / 64.0;
                Point3::new(c[0] + j(&mut rng), c[1] + j(&mut rng), c[2] + j(&mut rng))
            }
        })
        .collect();
    let eps = rng.random_range(1..=24) as f64 / 64.0;
    let min_points = rng.random_range(1..=12);
    (points, eps, min_points)
}
