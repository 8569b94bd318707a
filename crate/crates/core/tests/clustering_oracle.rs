// SPDX-License-Identifier: Apache-2.0

mod common;

use leafcut::clustering::dbscan_points;
use leafcut::ClusteringParams;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kdtree_dbscan_matches_brute_force(seed in any::<u64>()) {
        let (points, eps, min_points) = common::random_cloud(seed);
        let got = dbscan_points(&points, &ClusteringParams::new(eps, min_points).unwrap());
        let want = common::dbscan_reference(&points, eps, min_points);
        prop_assert_eq!(common::canonical(got.labels()), common::canonical(&want));
        // Both number clusters by lowest core index, so ids agree as well.
        prop_assert_eq!(got.labels(), &want[..]);
    }
}

#[test]
fn reference_handles_chain_and_border() {
    use leafcut::Point3;
    // A chain of cores 0..4 spaced 1 apart, then a border point 1 beyond.
    let pts: Vec<Point3> = (0..6).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    let labels = common::dbscan_reference(&pts, 1.0, 3);
    assert_eq!(labels, vec![Some(0); 6]);
    let labels = common::dbscan_reference(&pts, 0.5, 2);
    assert_eq!(labels, vec![None; 6]);
}
