// SPDX-License-Identifier: Apache-2.0

//! Detection matching, 6D pose error and timing statistics.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canopy_synth::GroundTruth;
use crate::cloud_io::Pose6D;
use crate::leaf_detect::LeafCandidate;

/// Quaternions whose norm is further than this from 1 are flagged.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot summarize an empty sample")]
    EmptyInput,
    #[error("match threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(truth id, candidate rank)`, in the order they were paired.
    pub pairs: Vec<(u32, usize)>,
    /// Truth ids with no candidate.
    pub missed: Vec<u32>,
    /// Candidate ranks with no truth leaf.
    pub false_positives: Vec<usize>,
}

impl MatchResult {
    pub fn n_truth(&self) -> usize {
        self.pairs.len() + self.missed.len()
    }

    /// Matched over total truth; `None` without truth leaves.
    pub fn detection_rate(&self) -> Option<f64> {
        let n = self.n_truth();
        (n > 0).then(|| self.pairs.len() as f64 / n as f64)
    }
}

/// Half the mean ground-truth leaf length.
pub fn default_match_threshold(truth: &GroundTruth) -> Option<f64> {
    truth.mean_leaf_length().map(|l| l / 2.0)
}

/// Greedy global-nearest matching on raw centers.
pub fn match_centers(
    truth: &[(u32, Vector3<f64>)],
    candidates: &[(usize, Vector3<f64>)],
    threshold: f64,
) -> Result<MatchResult, EvalError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(EvalError::Threshold(threshold));
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (_, t)) in truth.iter().enumerate() {
        for (j, (_, c)) in candidates.iter().enumerate() {
            let d = (t - c).norm();
            if d <= threshold {
                edges.push((d, i, j));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut truth_used = vec![false; truth.len()];
    let mut cand_used = vec![false; candidates.len()];
    let mut out = MatchResult::default();
    for (_, i, j) in edges {
        if !truth_used[i] && !cand_used[j] {
            truth_used[i] = true;
            cand_used[j] = true;
            out.pairs.push((truth[i].0, candidates[j].0));
        }
    }
    out.missed = truth
        .iter()
        .zip(&truth_used)
        .filter(|(_, u)| !**u)
        .map(|(t, _)| t.0)
        .collect();
    out.false_positives = candidates
        .iter()
        .zip(&cand_used)
        .filter(|(_, u)| !**u)
        .map(|(c, _)| c.0)
        .collect();
    Ok(out)
}

pub fn match_detections(
    truth: &GroundTruth,
    candidates: &[LeafCandidate],
    threshold: f64,
) -> Result<MatchResult, EvalError> {
    let t: Vec<(u32, Vector3<f64>)> = truth
        .leaves
        .iter()
        .map(|l| (l.id, l.center.translation))
        .collect();
    let c: Vec<(usize, Vector3<f64>)> = candidates.iter().map(|c| (c.rank, c.obb.center)).collect();
    match_centers(&t, &c, threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Millimeters.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Degrees, after removing the half-turn symmetry about the normal.
    pub angle: f64,
}

/// Geodesic angle between two rotations, radians.
fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

/// Angle between rotations modulo a half-turn about the body d-axis, radians.
pub fn symmetric_angle(truth: &UnitQuaternion<f64>, est: &UnitQuaternion<f64>) -> f64 {
    let flip = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI);
    rotation_angle(truth, est).min(rotation_angle(truth, &(est * flip)))
}

pub fn pose_error(truth: &Pose6D, est: &Pose6D) -> PoseError {
    let d = (truth.translation - est.translation).abs() * 1e3;
    PoseError {
        dx: d.x,
        dy: d.y,
        dz: d.z,
        angle: symmetric_angle(&truth.rotation, &est.rotation).to_degrees(),
    }
}

/// Normalizes a `[w, x, y, z]` quaternion. The flag is set when its norm was
/// off by more than [`QUATERNION_NORM_TOLERANCE`].
pub fn normalize_quaternion(q: [f64; 4]) -> Result<(UnitQuaternion<f64>, bool), EvalError> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = raw.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EvalError::ZeroQuaternion);
    }
    let flagged = (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE;
    Ok((Unit::new_normalize(raw), flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub mean: PoseError,
    /// Population standard deviation.
    pub std: PoseError,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_pose_errors(errors: &[PoseError]) -> Result<PoseSummary, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (mx, sx) = mean_std(errors.iter().map(|e| e.dx));
    let (my, sy) = mean_std(errors.iter().map(|e| e.dy));
    let (mz, sz) = mean_std(errors.iter().map(|e| e.dz));
    let (ma, sa) = mean_std(errors.iter().map(|e| e.angle));
    Ok(PoseSummary {
        mean: PoseError {
            dx: mx,
            dy: my,
            dz: mz,
            angle: ma,
        },
        std: PoseError {
            dx: sx,
            dy: sy,
            dz: sz,
            angle: sa,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn timing_summary(samples: &[f64]) -> Result<TimingStats, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let (mean, std) = mean_std(samples.iter().copied());
    Ok(TimingStats {
        min: sorted[0],
        max: sorted[n - 1],
        mean,
        median,
        std,
    })
}

/// One row of the detection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub dataset: String,
    pub point_clouds: usize,
    pub total_leaves: usize,
    pub detected: usize,
}

impl DetectionRow {
    pub fn percentage(&self) -> Option<f64> {
        (self.total_leaves > 0).then(|| 100.0 * self.detected as f64 / self.total_leaves as f64)
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn detection_table_csv(rows: &[DetectionRow]) -> String {
    let mut out = vec![[
        "Dataset",
        "Point Clouds",
        "Total # Leaves",
        "Average Detection",
        "Percentage",
    ]
    .map(String::from)
    .to_vec()];
    for r in rows {
        out.push(vec![
            r.dataset.clone(),
            r.point_clouds.to_string(),
            r.total_leaves.to_string(),
            r.detected.to_string(),
            r.percentage()
                .map_or_else(|| "n/a".into(), |p| format!("{p:.1}%")),
        ]);
    }
    csv_string(out)
}

pub fn pose_table_csv(summary: &PoseSummary) -> String {
    let row = |label: &str, e: &PoseError| {
        vec![
            label.to_string(),
            format!("{:.2}", e.dx),
            format!("{:.2}", e.dy),
            format!("{:.2}", e.dz),
            format!("{:.2}", e.angle),
        ]
    };
    csv_string(vec![
        ["Error", "Δx (mm)", "Δy (mm)", "Δz (mm)", "Orientation (deg)"]
            .map(String::from)
            .to_vec(),
        row("Mean", &summary.mean),
        row("Std dev", &summary.std),
    ])
}

/// Timing table with one column per named sample set.
pub fn timing_table_csv(columns: &[(&str, Option<TimingStats>)]) -> String {
    let mut header = vec!["Metric".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    let mut rows = vec![header];
    type Metric = (&'static str, fn(&TimingStats) -> f64);
    let metrics: [Metric; 5] = [
        ("Min", |s| s.min),
        ("Max", |s| s.max),
        ("Mean", |s| s.mean),
        ("Median", |s| s.median),
        ("Std dev", |s| s.std),
    ];
    for (label, get) in metrics {
        let mut row = vec![label.to_string()];
        row.extend(columns.iter().map(|(_, s)| {
            s.as_ref()
                .map_or_else(|| "n/a".into(), |s| format!("{:.2}", get(s)))
        }));
        rows.push(row);
    }
    csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn single_exact_match() {
        let m = match_centers(&[(0, v(0.0, 0.0, 0.25))], &[(0, v(0.0, 0.0, 0.25))], 0.04).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.detection_rate(), Some(1.0));
    }

    #[test]
    fn no_candidates_means_all_missed() {
        let m = match_centers(&[(0, v(0.0, 0.0, 0.2)), (1, v(0.1, 0.0, 0.2))], &[], 0.04).unwrap();
        assert_eq!(m.missed, vec![0, 1]);
        assert_eq!(m.detection_rate(), Some(0.0));
    }

    #[test]
    fn sixteen_of_twenty() {
        let truth: Vec<_> = (0..20)
            .map(|i| (i as u32, v(i as f64 * 0.1, 0.0, 0.25)))
            .collect();
        let cands: Vec<_> = (0..16)
            .map(|i| (i, v(i as f64 * 0.1 + 0.005, 0.0, 0.25)))
            .collect();
        let m = match_centers(&truth, &cands, 0.04).unwrap();
        assert!((m.detection_rate().unwrap() * 100.0 - 80.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_takes_globally_nearest_first() {
        // t0 is slightly nearer to c0 than t1 is, so t1 falls back to c1.
        let truth = [(0, v(0.0, 0.0, 0.0)), (1, v(0.03, 0.0, 0.0))];
        let cands = [(0, v(0.014, 0.0, 0.0)), (1, v(0.06, 0.0, 0.0))];
        let m = match_centers(&truth, &cands, 0.04).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn threshold_must_be_positive() {
        assert_eq!(match_centers(&[], &[], 0.0), Err(EvalError::Threshold(0.0)));
    }

    #[test]
    fn identical_poses_have_zero_error() {
        let p = Pose6D::from_euler_zyx(0.3, 0.2, -0.1, v(0.1, 0.2, 0.3));
        let e = pose_error(&p, &p);
        assert_eq!((e.dx, e.dy, e.dz), (0.0, 0.0, 0.0));
        assert!(e.angle < 1e-12);
    }

    #[test]
    fn translation_offsets_are_per_axis() {
        let a = Pose6D::from_translation(v(0.1, 0.2, 0.3));
        let b = Pose6D::from_translation(v(0.1 + 0.00828, 0.2 - 0.01438, 0.3 + 0.01554));
        let e = pose_error(&a, &b);
        assert!((e.dx - 8.28).abs() < 1e-9);
        assert!((e.dy - 14.38).abs() < 1e-9);
        assert!((e.dz - 15.54).abs() < 1e-9);
        assert!(e.angle.abs() < 1e-9);
    }

    #[test]
    fn half_turn_about_normal_is_free() {
        let a = Pose6D::from_euler_zyx(0.4, -0.3, 0.2, v(0.0, 0.0, 0.25));
        let flip = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI);
        let b = Pose6D::new(a.translation, a.rotation * flip);
        assert!(pose_error(&a, &b).angle < 1e-6);
    }

    #[test]
    fn half_turn_about_length_axis_is_not_free() {
        let a = Pose6D::identity();
        let b = Pose6D::new(
            Vector3::zeros(),
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI),
        );
        assert!((pose_error(&a, &b).angle - 180.0).abs() < 1e-9);
    }

    #[test]
    fn quaternion_normalization_flag() {
        let (_, flagged) = normalize_quaternion([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!flagged);
        let (q, flagged) = normalize_quaternion([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(flagged);
        assert_eq!(q, UnitQuaternion::identity());
        assert_eq!(normalize_quaternion([0.0; 4]), Err(EvalError::ZeroQuaternion));
    }

    #[test]
    fn aggregate_single_and_pair() {
        let a = PoseError {
            dx: 1.0,
            dy: 2.0,
            dz: 3.0,
            angle: 4.0,
        };
        let s = aggregate_pose_errors(&[a]).unwrap();
        assert_eq!(s.mean, a);
        assert_eq!(s.std, PoseError::default());
        let b = PoseError {
            dx: 3.0,
            dy: 2.0,
            dz: 1.0,
            angle: 0.0,
        };
        let s = aggregate_pose_errors(&[a, b]).unwrap();
        assert_eq!(
            s.mean,
            PoseError {
                dx: 2.0,
                dy: 2.0,
                dz: 2.0,
                angle: 2.0
            }
        );
        assert_eq!(
            s.std,
            PoseError {
                dx: 1.0,
                dy: 0.0,
                dz: 1.0,
                angle: 2.0
            }
        );
        assert_eq!(aggregate_pose_errors(&[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn twelve_sample_aggregate_matches_hand_computation() {
        let dx = [3.1, 12.4, 7.7, 0.9, 15.2, 8.8, 4.4, 9.9, 11.0, 6.3, 2.5, 17.1];
        let errs: Vec<PoseError> = dx
            .iter()
            .enumerate()
            .map(|(i, &x)| PoseError {
                dx: x,
                dy: x / 2.0,
                dz: i as f64,
                angle: 1.5 * i as f64,
            })
            .collect();
        let s = aggregate_pose_errors(&errs).unwrap();
        // Column dx: sum 99.3, mean 8.275; sum of squares 1108.67.
        let mean = 99.3 / 12.0;
        let var = 1108.67 / 12.0 - mean * mean;
        assert!((s.mean.dx - mean).abs() < 1e-9);
        assert!((s.std.dx - var.sqrt()).abs() < 1e-9);
        // Column dz: 0..11, mean 5.5, population variance (144 - 1) / 12.
        assert!((s.mean.dz - 5.5).abs() < 1e-12);
        assert!((s.std.dz - (143.0f64 / 12.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn timing_examples() {
        let s = timing_summary(&[5.6]).unwrap();
        assert_eq!((s.min, s.max, s.mean, s.median, s.std), (5.6, 5.6, 5.6, 5.6, 0.0));
        let s = timing_summary(&[0.5, 11.0]).unwrap();
        assert_eq!((s.min, s.max, s.median), (0.5, 11.0, 5.75));
        assert_eq!(timing_summary(&[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn csv_headers() {
        let t = detection_table_csv(&[DetectionRow {
            dataset: "Indoor".into(),
            point_clouds: 10,
            total_leaves: 20,
            detected: 16,
        }]);
        assert_eq!(
            t,
            "Dataset,Point Clouds,Total # Leaves,Average Detection,Percentage\nIndoor,10,20,16,80.0%\n"
        );
        let p = pose_table_csv(&aggregate_pose_errors(&[PoseError::default()]).unwrap());
        assert!(p.starts_with("Error,Δx (mm),Δy (mm),Δz (mm),Orientation (deg)\nMean,"));
        let tt = timing_table_csv(&[
            ("Perception Part", timing_summary(&[1.0]).ok()),
            ("Actuation Part", None),
        ]);
        assert!(tt.starts_with("Metric,Perception Part,Actuation Part\nMin,1.00,n/a\n"));
    }

    fn arb_rot() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (-PI..PI, -1.5..1.5f64, -PI..PI).prop_map(|(a, b, c)| UnitQuaternion::from_euler_angles(a, b, c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn symmetric_angle_triangle_inequality(a in arb_rot(), b in arb_rot(), c in arb_rot()) {
            let ab = symmetric_angle(&a, &b);
            let bc = symmetric_angle(&b, &c);
            let ac = symmetric_angle(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((0.0..=PI + 1e-12).contains(&ac));
        }
    }

    proptest! {
        #[test]
        fn matching_ignores_candidate_labels(
            pts in prop::collection::vec(prop::array::uniform3(-0.3..0.3f64), 0..12),
            cands in prop::collection::vec(prop::array::uniform3(-0.3..0.3f64), 0..12),
        ) {
            let truth: Vec<_> = pts.iter().enumerate().map(|(i, p)| (i as u32, Vector3::from(*p))).collect();
            let a: Vec<_> = cands.iter().enumerate().map(|(i, p)| (i, Vector3::from(*p))).collect();
            let b: Vec<_> = cands.iter().enumerate().map(|(i, p)| (100 - i, Vector3::from(*p))).collect();
            let ma = match_centers(&truth, &a, 0.05).unwrap();
            let mb = match_centers(&truth, &b, 0.05).unwrap();
            prop_assert_eq!(ma.pairs.len(), mb.pairs.len());
            prop_assert_eq!(&ma.missed, &mb.missed);
            let rate = ma.detection_rate().unwrap_or(0.0);
            prop_assert!((0.0..=1.0).contains(&rate));
        }

        #[test]
        fn greedy_pairs_respect_threshold(
            pts in prop::collection::vec(prop::array::uniform3(-0.2..0.2f64), 0..10),
            cands in prop::collection::vec(prop::array::uniform3(-0.2..0.2f64), 0..10),
        ) {
            let truth: Vec<_> = pts.iter().enumerate().map(|(i, p)| (i as u32, Vector3::from(*p))).collect();
            let c: Vec<_> = cands.iter().enumerate().map(|(i, p)| (i, Vector3::from(*p))).collect();
            let m = match_centers(&truth, &c, 0.08).unwrap();
            for (t, k) in &m.pairs {
                prop_assert!((truth[*t as usize].1 - c[*k].1).norm() <= 0.08);
            }
            prop_assert_eq!(m.pairs.len() + m.missed.len(), truth.len());
            prop_assert_eq!(m.pairs.len() + m.false_positives.len(), c.len());
        }
    }
}
