// SPDX-License-Identifier: Apache-2.0

//! Leaf detection and localization on depth-camera point clouds.
//!
//! The perception pipeline crops the cloud by range, removes statistical
//! outliers, voxel-downsamples, clusters with DBSCAN, fits a PCA oriented
//! bounding box to each cluster and keeps clusters whose point count, volume
//! and length/width ratio look like a leaf. Survivors are ranked nearest
//! first and handed to a retrieval queue.
//!
//! Around that pipeline the crate provides a seeded synthetic canopy
//! generator with per-point ground truth, a geometric simulator of the
//! capture-and-cut retrieval funnel, and evaluation metrics for detection
//! rate and 6D pose error.

pub mod canopy_synth;
pub mod cloud_io;
pub mod clustering;
pub mod config;
pub mod eval_metrics;
pub mod leaf_detect;
pub mod preprocess;
pub mod retrieval_sim;

pub use canopy_synth::{
    generate_scene, sample_leaf_surface, GroundTruth, GroundTruthFile, LeafSpec, SceneSpec,
};
pub use cloud_io::{
    parse_cloud, parse_cloud_with_report, transform_cloud, write_cloud, CloudError, CloudFormat, FormatHint,
    ParseReport, Point3, PointCloud, Pose6D, Rgb,
};
pub use clustering::{dbscan, ClusterLabels, ClusteringParams};
pub use config::{PipelineConfig, Profile};
pub use eval_metrics::{aggregate_pose_errors, match_detections, pose_error, timing_summary, PoseError};
pub use leaf_detect::{
    candidate_queue, detect_leaves, detect_leaves_detailed, fit_obb, geometric_filter, CandidateSet,
    LeafCandidate, LeafFilterConfig, OrientedBoundingBox,
};
pub use preprocess::PreprocessConfig;
pub use retrieval_sim::{run_trials, TrialConfig, TrialReport};
