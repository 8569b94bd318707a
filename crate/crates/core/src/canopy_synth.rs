// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic canopy scenes with per-point labels.
//!
//! A leaf is a bent teardrop. In its own frame, with `t` in `[0, 1]` running
//! from the stem junction to the tip and `s` in `[-1, 1]` across the blade,
//!
//! ```text
//! u = (t - 0.5) * length
//! v = s * (width / 2) * sin(pi t)^0.7
//! n = curvature * length * (t - 0.5)^2
//! ```
//!
//! where `u`, `v`, `n` run along the h, w and d axes of the leaf pose. The pose
//! origin is the planform center (`t = 0.5`). Stems are not rendered; they are
//! kept as segments for the retrieval simulator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud_io::{Point3, PointCloud, Pose6D, Rgb, DEFAULT_FRAME_ID};
use crate::config::Profile;

pub const GROUND_TRUTH_SCHEMA: &str = "leafcut/ground_truth/v1";

pub const LEAF_LENGTH_RANGE: [f64; 2] = [0.054, 0.150];
pub const LEAF_WIDTH_RANGE: [f64; 2] = [0.024, 0.086];
const LEAF_RATIO_RANGE: [f64; 2] = [1.4, 2.6];
const CURVATURE_RANGE: [f64; 2] = [0.15, 0.45];
const STEM_LENGTH_RANGE: [f64; 2] = [0.010, 0.030];
const BRANCH_DIAMETER_RANGE: [f64; 2] = [0.008, 0.015];
const BRANCH_LENGTH_RANGE: [f64; 2] = [0.15, 0.35];
const BRANCH_CLEARANCE: f64 = 0.015;

/// Depth camera field of view, radians.
const FOV_H: f64 = 87.0 * PI / 180.0;
const FOV_V: f64 = 58.0 * PI / 180.0;
/// Leaf centers stay inside this fraction of the field of view.
const PLACEMENT_FOV_SCALE: f64 = 0.8;
const PLACEMENT_RETRIES: usize = 200;
/// Angular pixel for hidden-point removal.
const OCCLUSION_PIXEL: f64 = 0.3 * PI / 180.0;
const OCCLUSION_TOLERANCE: f64 = 0.002;

const PLANFORM_EXPONENT: f64 = 0.7;
const CDF_INTERVALS: usize = 4096;
const MOMENT_INTERVALS: usize = 1 << 20;

const LEAF_COLOR: Rgb = [46, 139, 58];
const BRANCH_COLOR: Rgb = [101, 67, 33];
const BACKGROUND_COLOR: Rgb = [128, 128, 128];

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place leaf {leaf} after {attempts} attempts")]
    Placement { leaf: usize, attempts: usize },
}

fn planform_shape(t: f64) -> f64 {
    (PI * t).sin().max(0.0).powf(PLANFORM_EXPONENT)
}

struct Planform {
    /// Normalized cumulative area over `t`, `CDF_INTERVALS + 1` knots.
    cdf: Vec<f64>,
    /// Integral of the shape over `[0, 1]`; area = length * width * this.
    area_factor: f64,
    /// Area-weighted mean of `(t - 0.5)^2`.
    bend_moment: f64,
}

fn planform() -> &'static Planform {
    static TABLE: OnceLock<Planform> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = MOMENT_INTERVALS;
        let h = 1.0 / n as f64;
        let (mut area, mut moment) = (0.0, 0.0);
        for i in 0..=n {
            let t = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let f = planform_shape(t);
            area += w * f;
            moment += w * f * (t - 0.5) * (t - 0.5);
        }
        area *= h / 3.0;
        moment *= h / 3.0;

        let m = CDF_INTERVALS;
        let mut cdf = Vec::with_capacity(m + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 0..m {
            let (a, b) = (i as f64 / m as f64, (i + 1) as f64 / m as f64);
            acc += (planform_shape(a) + planform_shape(b)) / 2.0 / m as f64;
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Planform {
            cdf,
            area_factor: area,
            bend_moment: moment / area,
        }
    })
}

/// Maps a uniform variate to `t` so that samples are uniform in leaf area.
fn inverse_cdf(u: f64) -> f64 {
    let cdf = &planform().cdf;
    let m = cdf.len() - 1;
    let i = cdf.partition_point(|&c| c <= u).clamp(1, m);
    let (lo, hi) = (cdf[i - 1], cdf[i]);
    let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
    ((i - 1) as f64 + frac.clamp(0.0, 1.0)) / m as f64
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut out) = (inv, 0.0);
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    /// Stem junction at the `t = 0` end of the blade, sensor frame.
    pub junction: Vector3<f64>,
    /// Meters; the stem runs from the junction along `-h`.
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafSpec {
    pub length: f64,
    pub width: f64,
    /// Planform center; columns of the rotation are (h, w, d).
    pub pose: Pose6D,
    pub curvature: f64,
    pub stem: Stem,
}

impl LeafSpec {
    pub fn new(length: f64, width: f64, pose: Pose6D, curvature: f64, stem_length: f64) -> Self {
        let mut spec = Self {
            length,
            width,
            pose,
            curvature,
            stem: Stem {
                junction: Vector3::zeros(),
                length: stem_length,
            },
        };
        spec.stem.junction = spec.surface_point(0.0, 0.0).coords;
        spec
    }

    pub fn half_width(&self, t: f64) -> f64 {
        self.width / 2.0 * planform_shape(t)
    }

    /// Surface point in the leaf frame.
    pub fn local_point(&self, t: f64, s: f64) -> Vector3<f64> {
        let u = t - 0.5;
        Vector3::new(
            u * self.length,
            s * self.half_width(t),
            self.curvature * self.length * u * u,
        )
    }

    /// Surface point in the sensor frame.
    pub fn surface_point(&self, t: f64, s: f64) -> Point3 {
        self.pose.transform_point(&Point3::from(self.local_point(t, s)))
    }

    /// Planform area, square meters.
    pub fn area(&self) -> f64 {
        self.length * self.width * planform().area_factor
    }

    /// Area centroid of the bent surface, sensor frame.
    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.curvature * self.length * planform().bend_moment;
        self.pose.translation + self.pose.axis(2) * n
    }

    /// Ground-truth center pose: centroid position, leaf orientation.
    pub fn center_pose(&self) -> Pose6D {
        Pose6D::new(self.centroid(), self.pose.rotation)
    }

    pub fn stem_end(&self) -> Vector3<f64> {
        self.stem.junction - self.pose.axis(0) * self.stem.length
    }
}

/// Area-uniform low-discrepancy samples of the leaf surface;
/// `round(area * density)` points.
pub fn sample_leaf_surface(spec: &LeafSpec, density: f64) -> Vec<Point3> {
    let n = (spec.area() * density).round() as usize;
    sample_leaf_points(spec, n, [0.0, 0.0])
}

/// Halton(2, 3) with a Cranley-Patterson shift.
fn sample_leaf_points(spec: &LeafSpec, n: usize, shift: [f64; 2]) -> Vec<Point3> {
    (1..=n as u64)
        .map(|i| {
            let a = (radical_inverse(i, 2) + shift[0]).fract();
            let b = (radical_inverse(i, 3) + shift[1]).fract();
            spec.surface_point(inverse_cdf(a), 2.0 * b - 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub n_leaves: usize,
    /// Depth range of leaf centers, meters.
    pub camera_range: [f64; 2],
    pub profile: Profile,
    /// Depth noise sigma = coeff * z^2, so meters per square meter.
    pub noise_sigma_coeff: f64,
    pub branch_count: usize,
    /// Fraction of leaves subject to hidden-point removal.
    pub occlusion_fraction: f64,
    pub seed: u64,
    /// Surface sampling density facing the camera at 1 m, points per m^2.
    pub density_at_1m: f64,
    /// Background plane density relative to `density_at_1m`.
    pub background_density_scale: f64,
    /// Largest angle between a leaf normal and the sensor `+z` axis.
    pub max_tilt_deg: f64,
    /// Spread of the leaf length axis about image-up, degrees either side.
    pub orientation_spread_deg: f64,
    /// Minimum center spacing as a fraction of the shorter leaf's length.
    pub min_separation_factor: f64,
    /// Minimum distance between the surfaces of two leaves, meters.
    pub min_surface_gap: f64,
}

impl SceneSpec {
    pub fn for_profile(profile: Profile, n_leaves: usize, seed: u64) -> Self {
        Self {
            n_leaves,
            camera_range: profile.camera_range(),
            profile,
            noise_sigma_coeff: 0.0028,
            branch_count: match profile {
                Profile::Indoor => 2,
                Profile::Outdoor => 5,
            },
            occlusion_fraction: 0.25,
            seed,
            density_at_1m: 3.0e5,
            background_density_scale: 0.05,
            max_tilt_deg: 45.0,
            orientation_spread_deg: 100.0,
            min_separation_factor: 0.7,
            min_surface_gap: 0.005,
        }
    }

    pub fn indoor(n_leaves: usize, seed: u64) -> Self {
        Self::for_profile(Profile::Indoor, n_leaves, seed)
    }

    pub fn outdoor(n_leaves: usize, seed: u64) -> Self {
        Self::for_profile(Profile::Outdoor, n_leaves, seed)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Spec(m));
        let [lo, hi] = self.camera_range;
        let [plo, phi] = self.profile.camera_range();
        if !(lo > 0.0 && lo <= hi && lo >= plo - 1e-12 && hi <= phi + 1e-12) {
            return err(format!(
                "camera_range {:?} must be ordered and inside {:?} for the {:?} profile",
                self.camera_range,
                self.profile.camera_range(),
                self.profile
            ));
        }
        if !(self.noise_sigma_coeff >= 0.0 && self.noise_sigma_coeff.is_finite()) {
            return err(format!(
                "noise_sigma_coeff {} must be >= 0",
                self.noise_sigma_coeff
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return err(format!(
                "occlusion_fraction {} must be in [0, 1]",
                self.occlusion_fraction
            ));
        }
        if !(self.density_at_1m > 0.0 && self.density_at_1m.is_finite()) {
            return err(format!("density_at_1m {} must be positive", self.density_at_1m));
        }
        if !(self.background_density_scale >= 0.0 && self.background_density_scale.is_finite()) {
            return err(format!(
                "background_density_scale {} must be >= 0",
                self.background_density_scale
            ));
        }
        if !(0.0..90.0).contains(&self.max_tilt_deg) {
            return err(format!("max_tilt_deg {} must be in [0, 90)", self.max_tilt_deg));
        }
        if !(0.0..=180.0).contains(&self.orientation_spread_deg) {
            return err(format!(
                "orientation_spread_deg {} must be in [0, 180]",
                self.orientation_spread_deg
            ));
        }
        if !(self.min_separation_factor >= 0.0 && self.min_separation_factor.is_finite()) {
            return err(format!(
                "min_separation_factor {} must be >= 0",
                self.min_separation_factor
            ));
        }
        if !(self.min_surface_gap >= 0.0 && self.min_surface_gap.is_finite()) {
            return err(format!("min_surface_gap {} must be >= 0", self.min_surface_gap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i32", try_from = "i32")]
pub enum PointLabel {
    Leaf(u32),
    Branch,
    Background,
}

impl From<PointLabel> for i32 {
    fn from(l: PointLabel) -> i32 {
        match l {
            PointLabel::Leaf(id) => id as i32,
            PointLabel::Branch => -1,
            PointLabel::Background => -2,
        }
    }
}

impl TryFrom<i32> for PointLabel {
    type Error = String;

    fn try_from(v: i32) -> Result<Self, Self::Error> {
        match v {
            -1 => Ok(PointLabel::Branch),
            -2 => Ok(PointLabel::Background),
            id if id >= 0 => Ok(PointLabel::Leaf(id as u32)),
            other => Err(format!("invalid point label {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafTruth {
    pub id: u32,
    pub spec: LeafSpec,
    /// Centroid pose in the sensor frame.
    pub center: Pose6D,
    /// Whether hidden-point removal was applied to this leaf.
    pub occluded: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub leaves: Vec<LeafTruth>,
    pub branches: Vec<BranchSpec>,
    /// One label per cloud point, same order.
    pub labels: Vec<PointLabel>,
}

impl GroundTruth {
    /// Points per leaf id, then branch and background counts.
    pub fn label_counts(&self) -> (Vec<usize>, usize, usize) {
        let mut leaves = vec![0; self.leaves.len()];
        let (mut branch, mut background) = (0, 0);
        for l in &self.labels {
            match l {
                PointLabel::Leaf(id) => leaves[*id as usize] += 1,
                PointLabel::Branch => branch += 1,
                PointLabel::Background => background += 1,
            }
        }
        (leaves, branch, background)
    }

    pub fn mean_leaf_length(&self) -> Option<f64> {
        if self.leaves.is_empty() {
            return None;
        }
        Some(self.leaves.iter().map(|l| l.spec.length).sum::<f64>() / self.leaves.len() as f64)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Orientation and shape of a leaf before it is positioned.
struct LeafDraw {
    length: f64,
    width: f64,
    curvature: f64,
    stem_length: f64,
    axes: Matrix3<f64>,
}

fn draw_leaf(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> LeafDraw {
    let length = uniform(rng, LEAF_LENGTH_RANGE);
    let ratio = uniform(rng, LEAF_RATIO_RANGE);
    let width = (length / ratio).clamp(LEAF_WIDTH_RANGE[0], LEAF_WIDTH_RANGE[1]);
    let curvature = uniform(rng, CURVATURE_RANGE);
    let stem_length = uniform(rng, STEM_LENGTH_RANGE);

    // Uniform on the spherical cap around +z.
    let cos_max = spec.max_tilt_deg.to_radians().cos();
    let cos_tilt = uniform(rng, [cos_max, 1.0]);
    let azimuth = uniform(rng, [0.0, 2.0 * PI]);
    let sin_tilt = (1.0 - cos_tilt * cos_tilt).max(0.0).sqrt();
    let d = Vector3::new(sin_tilt * azimuth.cos(), sin_tilt * azimuth.sin(), cos_tilt);

    // Length axis: image-up (-y) projected into the leaf plane, then spun
    // about the normal.
    let up = -Vector3::y();
    let h0 = (up - d * up.dot(&d)).normalize();
    let spread = spec.orientation_spread_deg.to_radians();
    let psi = uniform(rng, [-spread, spread]);
    let spin = UnitQuaternion::from_axis_angle(&Unit::new_normalize(d), psi);
    let h = (spin * h0).normalize();
    let w = d.cross(&h).normalize();
    LeafDraw {
        length,
        width,
        curvature,
        stem_length,
        axes: Matrix3::from_columns(&[h, w, d]),
    }
}

fn draw_in_frustum(rng: &mut ChaCha8Rng, range: [f64; 2], scale: f64) -> Vector3<f64> {
    let z = uniform(rng, range);
    let hx = z * (FOV_H / 2.0).tan() * scale;
    let hy = z * (FOV_V / 2.0).tan() * scale;
    let x = uniform(rng, [-hx, hx]);
    let y = uniform(rng, [-hy, hy]);
    Vector3::new(x, y, z)
}

/// Coarse surface grid used for leaf-leaf clearance tests.
fn leaf_skeleton(leaf: &LeafSpec) -> Vec<Point3> {
    const NT: usize = 24;
    const NS: usize = 7;
    let mut out = Vec::with_capacity((NT + 1) * NS);
    for i in 0..=NT {
        for j in 0..NS {
            let s = 2.0 * j as f64 / (NS - 1) as f64 - 1.0;
            out.push(leaf.surface_point(i as f64 / NT as f64, s));
        }
    }
    out
}

fn min_distance(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter()
        .flat_map(|p| b.iter().map(move |q| (p - q).norm_squared()))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn perpendicular_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = axis.cross(&seed).normalize();
    let e2 = axis.cross(&e1).normalize();
    (e1, e2)
}

/// Generates a labeled scene. Output is a pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut leaves: Vec<LeafSpec> = Vec::with_capacity(spec.n_leaves);
    let mut skeletons: Vec<Vec<Point3>> = Vec::with_capacity(spec.n_leaves);
    for i in 0..spec.n_leaves {
        let draw = draw_leaf(&mut rng, spec);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let c = draw_in_frustum(&mut rng, spec.camera_range, PLACEMENT_FOV_SCALE);
            let spaced = leaves.iter().all(|o| {
                let gap = spec.min_separation_factor * o.length.min(draw.length);
                (o.pose.translation - c).norm() >= gap
            });
            if !spaced {
                continue;
            }
            let pose = Pose6D::from_axes(c, &draw.axes);
            let leaf = LeafSpec::new(draw.length, draw.width, pose, draw.curvature, draw.stem_length);
            let skeleton = leaf_skeleton(&leaf);
            let clear = leaves.iter().zip(&skeletons).all(|(o, sk)| {
                let reach = (o.length + leaf.length) / 2.0 + spec.min_surface_gap;
                (o.pose.translation - c).norm() > reach || min_distance(sk, &skeleton) >= spec.min_surface_gap
            });
            if clear {
                placed = Some((leaf, skeleton));
                break;
            }
        }
        let Some((leaf, skeleton)) = placed else {
            return Err(SynthError::Placement {
                leaf: i,
                attempts: PLACEMENT_RETRIES,
            });
        };
        leaves.push(leaf);
        skeletons.push(skeleton);
    }

    let mut branches = Vec::with_capacity(spec.branch_count);
    for _ in 0..spec.branch_count {
        for _ in 0..PLACEMENT_RETRIES {
            let c = draw_in_frustum(&mut rng, spec.camera_range, 1.0);
            let radius = uniform(&mut rng, BRANCH_DIAMETER_RANGE) / 2.0;
            let len = uniform(&mut rng, BRANCH_LENGTH_RANGE);
            let a = uniform(&mut rng, [0.0, PI]);
            let dz = uniform(&mut rng, [-0.3, 0.3]);
            let dir = Vector3::new(a.cos(), a.sin(), dz).normalize();
            let (start, end) = (c - dir * (len / 2.0), c + dir * (len / 2.0));
            let clear = leaves.iter().all(|l| {
                point_segment_distance(&l.centroid(), &start, &end)
                    >= radius + l.length / 2.0 + BRANCH_CLEARANCE
            });
            if clear {
                branches.push(BranchSpec { start, end, radius });
                break;
            }
        }
    }

    let n_occluded = (spec.occlusion_fraction * spec.n_leaves as f64).round() as usize;
    let mut occluded = vec![false; spec.n_leaves];
    for i in index::sample(&mut rng, spec.n_leaves, n_occluded.min(spec.n_leaves)) {
        occluded[i] = true;
    }

    let mut points: Vec<Point3> = Vec::new();
    let mut labels: Vec<PointLabel> = Vec::new();

    for (id, leaf) in leaves.iter().enumerate() {
        let c = leaf.pose.translation;
        let facing = leaf.pose.axis(2).dot(&c.normalize()).abs();
        let density = spec.density_at_1m * facing / (c.z * c.z);
        let n = (leaf.area() * density).round() as usize;
        let shift = [rng.random::<f64>(), rng.random::<f64>()];
        let pts = sample_leaf_points(leaf, n, shift);
        labels.extend(std::iter::repeat_n(PointLabel::Leaf(id as u32), pts.len()));
        points.extend(pts);
    }

    for b in &branches {
        let axis = b.end - b.start;
        let len = axis.norm();
        let dir = axis / len;
        let (e1, e2) = perpendicular_basis(&dir);
        let mid = (b.start + b.end) / 2.0;
        let density = spec.density_at_1m / (mid.z * mid.z);
        let n = (2.0 * PI * b.radius * len * density).round() as usize;
        for _ in 0..n {
            let along = rng.random::<f64>() * len;
            let phi = rng.random::<f64>() * 2.0 * PI;
            let normal = e1 * phi.cos() + e2 * phi.sin();
            let p = b.start + dir * along + normal * b.radius;
            if normal.dot(&p) < 0.0 {
                points.push(Point3::from(p));
                labels.push(PointLabel::Branch);
            }
        }
    }

    if spec.background_density_scale > 0.0 {
        let z = 2.0 * spec.camera_range[1];
        let hx = z * (FOV_H / 2.0).tan();
        let hy = z * (FOV_V / 2.0).tan();
        let density = spec.density_at_1m * spec.background_density_scale / (z * z);
        let n = (4.0 * hx * hy * density).round() as usize;
        for _ in 0..n {
            let x = uniform(&mut rng, [-hx, hx]);
            let y = uniform(&mut rng, [-hy, hy]);
            points.push(Point3::new(x, y, z));
            labels.push(PointLabel::Background);
        }
    }

    if n_occluded > 0 {
        let keep = hidden_point_mask(&points, &labels, &occluded);
        let mut k = keep.iter();
        points.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        labels.retain(|_| *k.next().unwrap());
    }

    if spec.noise_sigma_coeff > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for p in &mut points {
            let r = p.coords.norm();
            let sigma = spec.noise_sigma_coeff * p.z * p.z;
            let e = unit.sample(&mut rng) * sigma;
            p.coords += p.coords * (e / r);
        }
    }

    let colors = labels
        .iter()
        .map(|l| match l {
            PointLabel::Leaf(_) => LEAF_COLOR,
            PointLabel::Branch => BRANCH_COLOR,
            PointLabel::Background => BACKGROUND_COLOR,
        })
        .collect();
    let cloud = PointCloud::with_colors(points, colors)
        .map_err(|e| SynthError::Spec(e.to_string()))?
        .with_frame_id(DEFAULT_FRAME_ID);

    let truth = GroundTruth {
        leaves: leaves
            .into_iter()
            .enumerate()
            .map(|(i, spec)| LeafTruth {
                id: i as u32,
                center: spec.center_pose(),
                spec,
                occluded: occluded[i],
            })
            .collect(),
        branches,
        labels,
    };
    Ok((cloud, truth))
}

/// Keeps every point except those on occluded leaves that sit behind a
/// nearer surface in the same angular pixel.
fn hidden_point_mask(points: &[Point3], labels: &[PointLabel], occluded: &[bool]) -> Vec<bool> {
    let pixel = |p: &Point3| {
        (
            (p.x.atan2(p.z) / OCCLUSION_PIXEL).floor() as i64,
            (p.y.atan2(p.z) / OCCLUSION_PIXEL).floor() as i64,
        )
    };
    let mut zbuf: HashMap<(i64, i64), f64> = HashMap::new();
    for p in points {
        let r = p.coords.norm();
        zbuf.entry(pixel(p)).and_modify(|d| *d = d.min(r)).or_insert(r);
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, l)| match l {
            PointLabel::Leaf(id) if occluded[*id as usize] => {
                p.coords.norm() <= zbuf[&pixel(p)] + OCCLUSION_TOLERANCE
            }
            _ => true,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafRecord {
    pub id: u32,
    pub length_m: f64,
    pub width_m: f64,
    pub curvature: f64,
    pub stem_length_m: f64,
    pub occluded: bool,
    /// Planform center, sensor frame.
    pub planform_center_m: [f64; 3],
    /// Surface centroid, sensor frame.
    pub center_m: [f64; 3],
    /// Leaf orientation `[w, x, y, z]`; columns are (h, w, d).
    pub quaternion: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub start_m: [f64; 3],
    pub end_m: [f64; 3],
    pub radius_m: f64,
}

/// JSON sidecar written next to a synthetic cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub schema_version: String,
    pub frame_id: String,
    pub scene: SceneSpec,
    pub leaves: Vec<LeafRecord>,
    pub branches: Vec<BranchRecord>,
    pub labels: Vec<PointLabel>,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl GroundTruthFile {
    pub fn new(scene: &SceneSpec, truth: &GroundTruth) -> Self {
        Self {
            schema_version: GROUND_TRUTH_SCHEMA.to_string(),
            frame_id: DEFAULT_FRAME_ID.to_string(),
            scene: *scene,
            leaves: truth
                .leaves
                .iter()
                .map(|l| LeafRecord {
                    id: l.id,
                    length_m: l.spec.length,
                    width_m: l.spec.width,
                    curvature: l.spec.curvature,
                    stem_length_m: l.spec.stem.length,
                    occluded: l.occluded,
                    planform_center_m: arr(&l.spec.pose.translation),
                    center_m: arr(&l.center.translation),
                    quaternion: l.spec.pose.quaternion_wxyz(),
                })
                .collect(),
            branches: truth
                .branches
                .iter()
                .map(|b| BranchRecord {
                    start_m: arr(&b.start),
                    end_m: arr(&b.end),
                    radius_m: b.radius,
                })
                .collect(),
            labels: truth.labels.clone(),
        }
    }

    /// Rebuilds the in-memory ground truth. Leaf centers are taken from the
    /// file rather than recomputed.
    pub fn to_truth(&self) -> GroundTruth {
        let leaves = self
            .leaves
            .iter()
            .map(|r| {
                let [w, x, y, z] = r.quaternion;
                let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
                let pose = Pose6D::new(Vector3::from(r.planform_center_m), rot);
                let spec = LeafSpec::new(r.length_m, r.width_m, pose, r.curvature, r.stem_length_m);
                LeafTruth {
                    id: r.id,
                    spec,
                    center: Pose6D::new(Vector3::from(r.center_m), rot),
                    occluded: r.occluded,
                }
            })
            .collect();
        GroundTruth {
            leaves,
            branches: self
                .branches
                .iter()
                .map(|b| BranchSpec {
                    start: Vector3::from(b.start_m),
                    end: Vector3::from(b.end_m),
                    radius: b.radius_m,
                })
                .collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ground truth serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaf_detect::fit_obb;
    use proptest::prelude::*;

    fn flat_leaf(length: f64, width: f64) -> LeafSpec {
        LeafSpec::new(
            length,
            width,
            Pose6D::from_translation(Vector3::new(0.0, 0.0, 0.25)),
            0.0,
            0.02,
        )
    }

    #[test]
    fn planform_integral_matches_gamma_closed_form() {
        // Gamma(0.85) / (sqrt(pi) * Gamma(1.35)), evaluated independently.
        let expected = 0.704_315_458_242_271_3;
        assert!(
            (planform().area_factor - expected).abs() < 1e-8,
            "{}",
            planform().area_factor
        );
    }

    #[test]
    fn halton_radical_inverse() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(6, 2), 0.375);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn inverse_cdf_endpoints_and_symmetry() {
        assert_eq!(inverse_cdf(0.0), 0.0);
        assert!((inverse_cdf(0.5) - 0.5).abs() < 1e-9);
        assert!((inverse_cdf(0.2) + inverse_cdf(0.8) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_leaf_is_coplanar() {
        let pts = sample_leaf_surface(&flat_leaf(0.1, 0.05), 1e5);
        let obb = fit_obb(&pts).unwrap();
        assert!(obb.dims[2] < 1e-9);
    }

    #[test]
    fn doubling_density_doubles_count() {
        let leaf = flat_leaf(0.1, 0.05);
        let a = sample_leaf_surface(&leaf, 1e5).len() as f64;
        let b = sample_leaf_surface(&leaf, 2e5).len() as f64;
        assert!((b - 2.0 * a).abs() <= 1.0);
    }

    #[test]
    fn fitted_dims_track_leaf_dims() {
        let leaf = flat_leaf(0.1, 0.05);
        let obb = fit_obb(&sample_leaf_surface(&leaf, 1e5)).unwrap();
        assert!((obb.dims[0] / 0.1 - 1.0).abs() < 0.05, "h {}", obb.dims[0]);
        assert!((obb.dims[1] / 0.05 - 1.0).abs() < 0.05, "w {}", obb.dims[1]);
    }

    #[test]
    fn junction_is_at_the_minus_h_end() {
        let leaf = flat_leaf(0.1, 0.05);
        assert!((leaf.stem.junction - Vector3::new(-0.05, 0.0, 0.25)).norm() < 1e-12);
        assert!((leaf.stem_end() - Vector3::new(-0.07, 0.0, 0.25)).norm() < 1e-12);
    }

    #[test]
    fn zero_leaves_yields_only_clutter() {
        let (cloud, truth) = generate_scene(&SceneSpec::indoor(0, 4)).unwrap();
        assert!(truth.leaves.is_empty());
        assert!(!cloud.is_empty());
        assert!(truth.labels.iter().all(|l| !matches!(l, PointLabel::Leaf(_))));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::indoor(5, 11);
        let (a, ta) = generate_scene(&spec).unwrap();
        let (b, tb) = generate_scene(&spec).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(ta, tb);
    }

    #[test]
    fn labels_cover_every_point() {
        let (cloud, truth) = generate_scene(&SceneSpec::indoor(6, 2)).unwrap();
        let (leaves, branch, background) = truth.label_counts();
        assert_eq!(leaves.iter().sum::<usize>() + branch + background, cloud.len());
        assert_eq!(truth.labels.len(), cloud.len());
    }

    #[test]
    fn noise_free_points_lie_on_their_surface() {
        let spec = SceneSpec {
            noise_sigma_coeff: 0.0,
            ..SceneSpec::indoor(3, 8)
        };
        let (cloud, truth) = generate_scene(&spec).unwrap();
        for (p, l) in cloud.points().iter().zip(&truth.labels) {
            if let PointLabel::Leaf(id) = l {
                let leaf = &truth.leaves[*id as usize].spec;
                let local = leaf.pose.inverse().transform_point(p).coords;
                let t = local.x / leaf.length + 0.5;
                let bend = leaf.curvature * leaf.length * (t - 0.5) * (t - 0.5);
                assert!((local.z - bend).abs() < 1e-9);
                assert!(local.y.abs() <= leaf.half_width(t) + 1e-9);
            }
        }
    }

    #[test]
    fn center_is_surface_centroid() {
        // Independent midpoint-rule integration over the (t, s) parameter
        // square, weighting by the planform half-width.
        let leaf = LeafSpec::new(
            0.12,
            0.05,
            Pose6D::from_euler_zyx(0.3, -0.2, 0.5, Vector3::new(0.01, -0.02, 0.27)),
            0.4,
            0.02,
        );
        let n = 400_000;
        let (mut area, mut acc) = (0.0, Vector3::zeros());
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            let w = leaf.half_width(t);
            area += w;
            acc += leaf.surface_point(t, 0.0).coords * w;
        }
        let centroid = acc / area;
        assert!(
            (leaf.centroid() - centroid).norm() < 1e-9,
            "{}",
            (leaf.centroid() - centroid).norm()
        );
    }

    #[test]
    fn placement_failure_names_the_leaf() {
        let spec = SceneSpec {
            min_separation_factor: 10.0,
            ..SceneSpec::indoor(3, 1)
        };
        assert!(matches!(
            generate_scene(&spec),
            Err(SynthError::Placement { leaf: 1, .. })
        ));
    }

    #[test]
    fn profile_range_is_enforced() {
        let spec = SceneSpec {
            camera_range: [0.5, 0.9],
            ..SceneSpec::indoor(1, 1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn label_codes_roundtrip() {
        for l in [PointLabel::Leaf(7), PointLabel::Branch, PointLabel::Background] {
            let code: i32 = l.into();
            assert_eq!(PointLabel::try_from(code), Ok(l));
        }
        assert!(PointLabel::try_from(-3).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let spec = SceneSpec::indoor(4, 21);
        let (_, truth) = generate_scene(&spec).unwrap();
        let file = GroundTruthFile::new(&spec, &truth);
        let back: GroundTruthFile = serde_json::from_str(&file.to_json()).unwrap();
        assert_eq!(back, file);
        let rebuilt = back.to_truth();
        for (a, b) in rebuilt.leaves.iter().zip(&truth.leaves) {
            assert!((a.center.translation - b.center.translation).norm() < 1e-15);
            assert!((a.spec.stem.junction - b.spec.stem.junction).norm() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), n in 0usize..6) {
            let spec = SceneSpec::indoor(n, seed);
            let (a, ta) = generate_scene(&spec).unwrap();
            let (b, tb) = generate_scene(&spec).unwrap();
            prop_assert_eq!(a.points(), b.points());
            prop_assert_eq!(ta.labels, tb.labels);
        }
    }
}
