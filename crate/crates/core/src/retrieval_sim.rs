// SPDX-License-Identifier: Apache-2.0

//! Geometric simulation of the capture-and-cut retrieval funnel.
//!
//! For a candidate with center `c`, length axis `h` and length `L`, the arm
//! parks at `c + L h` and slides the chamber along `-h` until its opening
//! plane sits just past the candidate's `-h` end:
//!
//! ```text
//! O = c - (L / 2 + stem_margin) h
//! ```
//!
//! The chamber occupies `0 <= (p - O).h <= depth` with the opening cross
//! section centered on the candidate's w and d axes. The blade closes in the
//! opening plane. Everything on the `-h` side of it stays on the tree.

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canopy_synth::{generate_scene, GroundTruth, LeafSpec, SceneSpec, SynthError};
use crate::cloud_io::PointCloud;
use crate::clustering::ClusteringParams;
use crate::eval_metrics::{timing_summary, timing_table_csv, TimingStats};
use crate::leaf_detect::{candidate_queue, detect_leaves_detailed, LeafCandidate, LeafFilterConfig};
use crate::preprocess::PreprocessConfig;

pub const TRIAL_REPORT_SCHEMA: &str = "leafcut/trial_report/v1";

/// Spacing of viability samples along the approach path, meters.
const PATH_STEP: f64 = 0.01;
/// Leaf surface grid used for capture and cut tests.
const LEAF_GRID_T: usize = 400;
const LEAF_GRID_S: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("campaign has no scenes")]
    EmptyCampaign,
    #[error("trial {index}: {source}")]
    Scene {
        index: usize,
        #[source]
        source: SynthError,
    },
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSpec {
    /// Arm base in the sensor frame, meters.
    pub base: [f64; 3],
    pub reach_min: f64,
    pub reach_max: f64,
}

impl Default for WorkspaceSpec {
    fn default() -> Self {
        Self {
            base: [0.0, 0.35, -0.55],
            reach_min: 0.15,
            reach_max: 0.9,
        }
    }
}

impl WorkspaceSpec {
    pub fn validate(&self) -> Result<(), TrialError> {
        if !(self.reach_min >= 0.0 && self.reach_min < self.reach_max && self.reach_max.is_finite()) {
            return Err(TrialError::Config(format!(
                "workspace reach [{}, {}] must satisfy 0 <= min < max",
                self.reach_min, self.reach_max
            )));
        }
        Ok(())
    }

    pub fn base(&self) -> Vector3<f64> {
        Vector3::from(self.base)
    }

    /// Closed spherical shell test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let r = (p - self.base()).norm();
        r >= self.reach_min && r <= self.reach_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChamberSpec {
    pub opening_w: f64,
    pub opening_h: f64,
    pub depth: f64,
}

impl Default for ChamberSpec {
    fn default() -> Self {
        Self {
            opening_w: 0.110,
            opening_h: 0.045,
            depth: 0.185,
        }
    }
}

impl ChamberSpec {
    pub fn validate(&self) -> Result<(), TrialError> {
        if [self.opening_w, self.opening_h, self.depth]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(TrialError::Config(format!(
                "chamber dims {self:?} must be positive"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Cuts on the blade within this distance of the junction are near misses.
    pub near_miss_band: f64,
    /// Distance the opening plane is placed past the candidate's stem end.
    pub stem_margin: f64,
    /// Simulated linear speed of the end effector, m/s.
    pub approach_speed: f64,
    /// Candidate-to-leaf matching radius; half the mean leaf length if unset.
    pub match_threshold: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            near_miss_band: 0.015,
            stem_margin: 0.002,
            approach_speed: 0.1,
            match_threshold: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), TrialError> {
        let ok = self.near_miss_band >= 0.0
            && self.stem_margin >= 0.0
            && self.approach_speed > 0.0
            && self.match_threshold.is_none_or(|t| t > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrialError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStage {
    NotCandidate,
    NotViable,
    CaptureFailed,
    CutFailed,
    CutMid,
    NearMiss,
    CleanCut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub stage: RetrievalStage,
    /// Meters from the stem junction to the cut, for any cut.
    pub cut_offset: Option<f64>,
    /// Ground-truth leaf the candidate was matched to.
    pub leaf: Option<u32>,
}

impl RetrievalOutcome {
    fn bare(stage: RetrievalStage, leaf: Option<u32>) -> Self {
        Self {
            stage,
            cut_offset: None,
            leaf,
        }
    }

    pub fn is_cut(&self) -> bool {
        matches!(
            self.stage,
            RetrievalStage::CutMid | RetrievalStage::NearMiss | RetrievalStage::CleanCut
        )
    }
}

pub fn filter_candidates(candidates: &[LeafCandidate], ws: &WorkspaceSpec) -> Vec<LeafCandidate> {
    candidates
        .iter()
        .filter(|c| ws.contains(&c.obb.center))
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproachPath {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub viable: bool,
}

impl ApproachPath {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }
}

pub fn approach_start(candidate: &LeafCandidate) -> Vector3<f64> {
    candidate.obb.center + candidate.pose.axis(0) * candidate.obb.dims[0]
}

/// Viable when every 1 cm sample of the straight path from the approach
/// point to the candidate center lies in the workspace shell.
pub fn check_viability(candidate: &LeafCandidate, ws: &WorkspaceSpec) -> ApproachPath {
    let start = approach_start(candidate);
    let end = candidate.obb.center;
    let steps = ((end - start).norm() / PATH_STEP).ceil().max(1.0) as usize;
    let viable = (0..=steps).all(|k| ws.contains(&(start + (end - start) * (k as f64 / steps as f64))));
    ApproachPath { start, end, viable }
}

/// Chamber frame at the end of the approach.
struct ChamberFrame {
    origin: Vector3<f64>,
    h: Vector3<f64>,
    w: Vector3<f64>,
    d: Vector3<f64>,
}

impl ChamberFrame {
    fn new(candidate: &LeafCandidate, cfg: &RetrievalConfig) -> Self {
        let h = candidate.pose.axis(0);
        Self {
            origin: candidate.obb.center - h * (candidate.obb.dims[0] / 2.0 + cfg.stem_margin),
            h,
            w: candidate.pose.axis(1),
            d: candidate.pose.axis(2),
        }
    }

    /// `(depth into chamber, lateral w, lateral d)`.
    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = p - self.origin;
        Vector3::new(r.dot(&self.h), r.dot(&self.w), r.dot(&self.d))
    }

    fn laterally_inside(&self, l: &Vector3<f64>, chamber: &ChamberSpec) -> bool {
        l.y.abs() <= chamber.opening_w / 2.0 && l.z.abs() <= chamber.opening_h / 2.0
    }
}

/// Capture and cut against a known leaf.
///
/// Capture needs every part of the blade in front of the opening plane to lie
/// inside the chamber, and the leaf centroid to have passed the plane. Parts
/// behind the plane are what the blade cuts off.
pub fn simulate_capture_leaf(
    candidate: &LeafCandidate,
    leaf: &LeafSpec,
    chamber: &ChamberSpec,
    cfg: &RetrievalConfig,
) -> (RetrievalStage, Option<f64>) {
    let frame = ChamberFrame::new(candidate, cfg);
    if frame.local(&leaf.centroid()).x < 0.0 {
        return (RetrievalStage::CaptureFailed, None);
    }

    // Arc length along the midline, indexed by grid row.
    let mut arc = Vec::with_capacity(LEAF_GRID_T + 1);
    let mut prev = leaf.surface_point(0.0, 0.0);
    let mut acc = 0.0;
    let mut deepest_cut: Option<f64> = None;
    for i in 0..=LEAF_GRID_T {
        let t = i as f64 / LEAF_GRID_T as f64;
        let mid = leaf.surface_point(t, 0.0);
        acc += (mid - prev).norm();
        prev = mid;
        arc.push(acc);
        for s in LEAF_GRID_S {
            let l = frame.local(&leaf.surface_point(t, s).coords);
            if l.x < 0.0 {
                deepest_cut = Some(deepest_cut.map_or(acc, |d: f64| d.max(acc)));
            } else if l.x > chamber.depth || !frame.laterally_inside(&l, chamber) {
                return (RetrievalStage::CaptureFailed, None);
            }
        }
    }

    if let Some(offset) = deepest_cut {
        let stage = if offset <= cfg.near_miss_band {
            RetrievalStage::NearMiss
        } else {
            RetrievalStage::CutMid
        };
        return (stage, Some(offset));
    }

    let a = frame.local(&leaf.stem.junction);
    let b = frame.local(&leaf.stem_end());
    if b.x < 0.0 {
        let f = a.x / (a.x - b.x);
        let crossing = a + (b - a) * f;
        if frame.laterally_inside(&crossing, chamber) {
            return (RetrievalStage::CleanCut, Some(f * leaf.stem.length));
        }
    }
    (RetrievalStage::CutFailed, None)
}

/// Nearest truth leaf within `threshold` that is still on the tree.
pub fn match_leaf(
    candidate: &LeafCandidate,
    truth: &GroundTruth,
    removed: &[bool],
    threshold: f64,
) -> Option<usize> {
    truth
        .leaves
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.get(*i).copied().unwrap_or(false))
        .map(|(i, l)| (i, (l.center.translation - candidate.obb.center).norm()))
        .filter(|(_, d)| *d <= threshold)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

fn resolve_threshold(truth: &GroundTruth, cfg: &RetrievalConfig) -> f64 {
    cfg.match_threshold
        .or_else(|| truth.mean_leaf_length().map(|l| l / 2.0))
        .unwrap_or(0.0)
}

/// Capture and cut against the scene's ground truth. An unmatched candidate
/// cannot be captured.
pub fn simulate_capture(
    candidate: &LeafCandidate,
    truth: &GroundTruth,
    chamber: &ChamberSpec,
    cfg: &RetrievalConfig,
) -> RetrievalOutcome {
    let threshold = resolve_threshold(truth, cfg);
    match match_leaf(candidate, truth, &[], threshold) {
        None => RetrievalOutcome::bare(RetrievalStage::CaptureFailed, None),
        Some(i) => {
            let (stage, cut_offset) = simulate_capture_leaf(candidate, &truth.leaves[i].spec, chamber, cfg);
            RetrievalOutcome {
                stage,
                cut_offset,
                leaf: Some(truth.leaves[i].id),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub potential: usize,
    pub candidate: usize,
    pub viable: usize,
    pub captured: usize,
    pub cut: usize,
    pub clean: usize,
    pub near_miss: usize,
    pub cut_mid: usize,
}

impl FunnelCounts {
    fn add(&mut self, o: &FunnelCounts) {
        self.potential += o.potential;
        self.candidate += o.candidate;
        self.viable += o.viable;
        self.captured += o.captured;
        self.cut += o.cut;
        self.clean += o.clean;
        self.near_miss += o.near_miss;
        self.cut_mid += o.cut_mid;
    }

    fn record(&mut self, stage: RetrievalStage) {
        use RetrievalStage::*;
        self.potential += 1;
        if stage == NotCandidate {
            return;
        }
        self.candidate += 1;
        if stage == NotViable {
            return;
        }
        self.viable += 1;
        if stage == CaptureFailed {
            return;
        }
        self.captured += 1;
        match stage {
            CleanCut => self.clean += 1,
            NearMiss => self.near_miss += 1,
            CutMid => self.cut_mid += 1,
            _ => return,
        }
        self.cut += 1;
    }

    pub fn is_monotone(&self) -> bool {
        self.potential >= self.candidate
            && self.candidate >= self.viable
            && self.viable >= self.captured
            && self.captured >= self.cut
            && self.cut >= self.clean
            && self.cut == self.clean + self.near_miss + self.cut_mid
    }
}

/// Each stage over its predecessor; clean and near-miss rates are over cuts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRates {
    pub candidate: Option<f64>,
    pub viable: Option<f64>,
    pub captured: Option<f64>,
    pub cut: Option<f64>,
    pub clean: Option<f64>,
    pub near_miss: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl From<&FunnelCounts> for StageRates {
    fn from(c: &FunnelCounts) -> Self {
        Self {
            candidate: ratio(c.candidate, c.potential),
            viable: ratio(c.viable, c.candidate),
            captured: ratio(c.captured, c.viable),
            cut: ratio(c.cut, c.captured),
            clean: ratio(c.clean, c.cut),
            near_miss: ratio(c.near_miss, c.cut),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub rank: usize,
    pub outcome: RetrievalOutcome,
    /// Simulated seconds for viable attempts.
    pub actuation_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub truth_leaves: usize,
    pub counts: FunnelCounts,
    pub attempts: Vec<AttemptRecord>,
    /// Wall-clock perception time; varies between runs.
    pub perception_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub perception: Option<TimingStats>,
    pub actuation: Option<TimingStats>,
    pub overall: Option<TimingStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub schema_version: String,
    pub trials: Vec<TrialRecord>,
    pub counts: FunnelCounts,
    pub rates: StageRates,
    pub timing: TimingReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub preprocess: PreprocessConfig,
    pub clustering: ClusteringParams,
    pub filter: LeafFilterConfig,
    pub workspace: WorkspaceSpec,
    pub chamber: ChamberSpec,
    pub retrieval: RetrievalConfig,
}

impl TrialConfig {
    pub fn indoor() -> Self {
        Self {
            preprocess: PreprocessConfig::indoor(),
            clustering: ClusteringParams::indoor(),
            filter: LeafFilterConfig::default(),
            workspace: WorkspaceSpec::default(),
            chamber: ChamberSpec::default(),
            retrieval: RetrievalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        self.preprocess
            .validate()
            .map_err(|e| TrialError::Config(e.to_string()))?;
        self.clustering
            .validate()
            .map_err(|e| TrialError::Config(e.to_string()))?;
        self.filter
            .validate()
            .map_err(|e| TrialError::Config(e.to_string()))?;
        self.workspace.validate()?;
        self.chamber.validate()?;
        self.retrieval.validate()
    }
}

fn actuation_seconds(path: &ApproachPath, ws: &WorkspaceSpec, cfg: &RetrievalConfig) -> f64 {
    let base = ws.base();
    let travel = (path.start - base).norm() + path.length() + (path.end - base).norm();
    travel / cfg.approach_speed
}

/// One trial on an existing scene: detect, queue, attempt until the queue is
/// empty. A cut leaf leaves the tree and cannot be matched again.
pub fn run_trial(
    index: usize,
    seed: u64,
    cloud: &PointCloud,
    truth: &GroundTruth,
    cfg: &TrialConfig,
) -> TrialRecord {
    let t0 = Instant::now();
    let detection = detect_leaves_detailed(cloud, &cfg.preprocess, &cfg.clustering, &cfg.filter);
    let perception_s = t0.elapsed().as_secs_f64();

    let threshold = resolve_threshold(truth, &cfg.retrieval);
    let mut removed = vec![false; truth.leaves.len()];
    let mut counts = FunnelCounts::default();
    let mut attempts = Vec::new();
    let mut queue = candidate_queue(detection.candidates);
    while let Some(c) = queue.pop() {
        let mut actuation_s = None;
        let outcome = if !cfg.workspace.contains(&c.obb.center) {
            RetrievalOutcome::bare(RetrievalStage::NotCandidate, None)
        } else {
            let path = check_viability(&c, &cfg.workspace);
            if !path.viable {
                RetrievalOutcome::bare(RetrievalStage::NotViable, None)
            } else {
                actuation_s = Some(actuation_seconds(&path, &cfg.workspace, &cfg.retrieval));
                match match_leaf(&c, truth, &removed, threshold) {
                    None => RetrievalOutcome::bare(RetrievalStage::CaptureFailed, None),
                    Some(i) => {
                        let (stage, cut_offset) =
                            simulate_capture_leaf(&c, &truth.leaves[i].spec, &cfg.chamber, &cfg.retrieval);
                        let out = RetrievalOutcome {
                            stage,
                            cut_offset,
                            leaf: Some(truth.leaves[i].id),
                        };
                        if out.is_cut() {
                            removed[i] = true;
                        }
                        out
                    }
                }
            }
        };
        counts.record(outcome.stage);
        attempts.push(AttemptRecord {
            rank: c.rank,
            outcome,
            actuation_s,
        });
    }
    TrialRecord {
        index,
        seed,
        truth_leaves: truth.leaves.len(),
        counts,
        attempts,
        perception_s,
    }
}

/// Generates each scene, runs its trial and aggregates. Scenes run in
/// parallel; results are merged in scene order.
pub fn run_trials(scenes: &[SceneSpec], cfg: &TrialConfig) -> Result<TrialReport, TrialError> {
    if scenes.is_empty() {
        return Err(TrialError::EmptyCampaign);
    }
    cfg.validate()?;
    let trials = scenes
        .par_iter()
        .enumerate()
        .map(|(index, spec)| {
            let (cloud, truth) =
                generate_scene(spec).map_err(|source| TrialError::Scene { index, source })?;
            Ok(run_trial(index, spec.seed, &cloud, &truth, cfg))
        })
        .collect::<Result<Vec<_>, TrialError>>()?;
    Ok(TrialReport::from_trials(trials))
}

impl TrialReport {
    pub fn from_trials(trials: Vec<TrialRecord>) -> Self {
        let mut counts = FunnelCounts::default();
        let mut perception = Vec::new();
        let mut actuation = Vec::new();
        let mut overall = Vec::new();
        for t in &trials {
            counts.add(&t.counts);
            perception.push(t.perception_s);
            for a in t.attempts.iter().filter_map(|a| a.actuation_s) {
                actuation.push(a);
                overall.push(t.perception_s + a);
            }
        }
        Self {
            schema_version: TRIAL_REPORT_SCHEMA.to_string(),
            rates: StageRates::from(&counts),
            counts,
            timing: TimingReport {
                perception: timing_summary(&perception).ok(),
                actuation: timing_summary(&actuation).ok(),
                overall: timing_summary(&overall).ok(),
            },
            trials,
        }
    }

    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_wall_clock(&self) -> Self {
        let trials = self
            .trials
            .iter()
            .map(|t| TrialRecord {
                perception_s: 0.0,
                ..t.clone()
            })
            .collect();
        Self::from_trials(trials)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trial report serializes")
    }

    /// Funnel table: `Stage,Number,Rate`.
    pub fn funnel_csv(&self) -> String {
        let pct = |r: Option<f64>| r.map_or_else(|| "N/A".to_string(), |r| format!("{:.1}%", 100.0 * r));
        let c = &self.counts;
        let r = &self.rates;
        let rows = [
            ("Potential Leaves", c.potential, "N/A".to_string()),
            ("Candidate Leaves", c.candidate, pct(r.candidate)),
            ("Viable Leaves", c.viable, pct(r.viable)),
            ("Successful Captures", c.captured, pct(r.captured)),
            ("Successful Cuts", c.cut, pct(r.cut)),
            ("Clean Cuts", c.clean, pct(r.clean)),
            ("Near Misses", c.near_miss, pct(r.near_miss)),
        ];
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["Stage", "Number", "Rate"])
            .expect("in-memory csv");
        for (label, n, rate) in rows {
            w.write_record([label, &n.to_string(), &rate])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// Timing table: `Metric,Perception Part,Actuation Part,Overall Retrieval`.
    pub fn timing_csv(&self) -> String {
        timing_table_csv(&[
            ("Perception Part", self.timing.perception),
            ("Actuation Part", self.timing.actuation),
            ("Overall Retrieval", self.timing.overall),
        ])
    }
}
