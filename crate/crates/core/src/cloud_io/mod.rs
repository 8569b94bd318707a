// SPDX-License-Identifier: Apache-2.0

//! Point cloud containers, rigid poses and the PCD / PLY codecs.
//!
//! Coordinates are stored in meters in the sensor (camera) frame with `+z`
//! along the optical axis. Every point held by a [`PointCloud`] is finite.
//! Binary encodings use little-endian `f32` for coordinates; ASCII encodings
//! print the same `f32` values in their shortest round-trip form.

mod pcd;
mod ply;
mod pose;

use thiserror::Error;

pub use pose::Pose6D;

/// A point in the sensor frame, meters.
pub type Point3 = nalgebra::Point3<f64>;

/// 8-bit RGB triple.
pub type Rgb = [u8; 3];

/// Default frame label for clouds that do not carry one.
pub const DEFAULT_FRAME_ID: &str = "camera";

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("malformed input at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("truncated body: expected {expected} points, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("color count {colors} does not match point count {points}")]
    ColorCount { points: usize, colors: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CloudError {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        CloudError::Format {
            offset,
            message: message.into(),
        }
    }
}

/// An ordered set of finite 3D points with optional per-point color.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    colors: Option<Vec<Rgb>>,
    frame_id: String,
}

impl Default for PointCloud {
    fn default() -> Self {
        Self::empty()
    }
}

impl PointCloud {
    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            colors: None,
            frame_id: DEFAULT_FRAME_ID.to_string(),
        }
    }

    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self, CloudError> {
        check_finite(&points)?;
        Ok(Self {
            points,
            colors: None,
            frame_id: DEFAULT_FRAME_ID.to_string(),
        })
    }

    pub fn with_colors(points: Vec<Point3>, colors: Vec<Rgb>) -> Result<Self, CloudError> {
        check_finite(&points)?;
        if colors.len() != points.len() {
            return Err(CloudError::ColorCount {
                points: points.len(),
                colors: colors.len(),
            });
        }
        Ok(Self {
            points,
            colors: Some(colors),
            frame_id: DEFAULT_FRAME_ID.to_string(),
        })
    }

    /// Caller guarantees finiteness and matching color length.
    pub(crate) fn from_parts(points: Vec<Point3>, colors: Option<Vec<Rgb>>, frame_id: String) -> Self {
        debug_assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        debug_assert!(colors.as_ref().is_none_or(|c| c.len() == points.len()));
        Self {
            points,
            colors,
            frame_id,
        }
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let colors = self
            .colors
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Self::from_parts(points, colors, self.frame_id.clone())
    }

    /// Keeps the points for which `keep` returns true, preserving order.
    pub fn retain_by(&self, mut keep: impl FnMut(usize, &Point3) -> bool) -> PointCloud {
        let indices: Vec<usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(i, _)| i)
            .collect();
        self.select(&indices)
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

fn check_finite(points: &[Point3]) -> Result<(), CloudError> {
    match points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(index) => Err(CloudError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Which parser to use. `Auto` sniffs the first bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatHint {
    Pcd,
    Ply,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PcdAscii,
    PcdBinary,
    PlyAscii,
    PlyBinary,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::PcdAscii | CloudFormat::PcdBinary => "pcd",
            CloudFormat::PlyAscii | CloudFormat::PlyBinary => "ply",
        }
    }
}

/// Side information collected while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Points declared by the header.
    pub declared: usize,
    /// Points dropped because a coordinate was NaN or infinite.
    pub dropped_non_finite: usize,
}

pub fn parse_cloud(bytes: &[u8], hint: FormatHint) -> Result<PointCloud, CloudError> {
    parse_cloud_with_report(bytes, hint).map(|(cloud, _)| cloud)
}

pub fn parse_cloud_with_report(
    bytes: &[u8],
    hint: FormatHint,
) -> Result<(PointCloud, ParseReport), CloudError> {
    let hint = match hint {
        FormatHint::Auto => sniff(bytes)?,
        h => h,
    };
    let raw = match hint {
        FormatHint::Pcd => pcd::parse(bytes)?,
        FormatHint::Ply => ply::parse(bytes)?,
        FormatHint::Auto => unreachable!(),
    };
    Ok(raw.finish())
}

fn sniff(bytes: &[u8]) -> Result<FormatHint, CloudError> {
    if bytes.starts_with(b"ply") {
        return Ok(FormatHint::Ply);
    }
    let head = &bytes[..bytes.len().min(512)];
    let head = String::from_utf8_lossy(head);
    if head
        .lines()
        .any(|l| l.starts_with("VERSION") || l.starts_with("FIELDS") || l.starts_with("# .PCD"))
    {
        return Ok(FormatHint::Pcd);
    }
    Err(CloudError::format(0, "neither a PCD nor a PLY header"))
}

pub fn write_cloud(cloud: &PointCloud, format: CloudFormat) -> Vec<u8> {
    match format {
        CloudFormat::PcdAscii => pcd::write(cloud, false),
        CloudFormat::PcdBinary => pcd::write(cloud, true),
        CloudFormat::PlyAscii => ply::write(cloud, false),
        CloudFormat::PlyBinary => ply::write(cloud, true),
    }
}

/// Maps every point `p` to `R p + t`.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose6D) -> PointCloud {
    let points = cloud.points.iter().map(|p| pose.transform_point(p)).collect();
    PointCloud::from_parts(points, cloud.colors.clone(), cloud.frame_id.clone())
}

/// Points as decoded, before non-finite filtering.
struct RawCloud {
    xyz: Vec<[f64; 3]>,
    colors: Option<Vec<Rgb>>,
    frame_id: Option<String>,
}

impl RawCloud {
    fn finish(self) -> (PointCloud, ParseReport) {
        let declared = self.xyz.len();
        let mut points = Vec::with_capacity(declared);
        let mut colors = self.colors.as_ref().map(|_| Vec::with_capacity(declared));
        for (i, p) in self.xyz.iter().enumerate() {
            if p.iter().all(|c| c.is_finite()) {
                points.push(Point3::new(p[0], p[1], p[2]));
                if let (Some(out), Some(src)) = (colors.as_mut(), self.colors.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        let report = ParseReport {
            declared,
            dropped_non_finite: declared - points.len(),
        };
        let frame_id = self.frame_id.unwrap_or_else(|| DEFAULT_FRAME_ID.to_string());
        (PointCloud::from_parts(points, colors, frame_id), report)
    }
}

/// Header lines with the byte offset at which each starts.
struct HeaderLines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderLines<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Returns `(offset, line)` without the trailing newline.
    fn next_line(&mut self) -> Option<Result<(usize, &'a str), CloudError>> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        self.pos = start + end + 1;
        let mut line = &rest[..end];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        Some(
            std::str::from_utf8(line)
                .map(|s| (start, s))
                .map_err(|_| CloudError::format(start, "header line is not valid UTF-8")),
        )
    }

    /// Byte offset of the body (after the last consumed line).
    fn body_offset(&self) -> usize {
        self.pos.min(self.bytes.len())
    }
}

/// Scalar storage types shared by both formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl Scalar {
    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::I64 | Scalar::U64 | Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        macro_rules! le {
            ($t:ty) => {
                <$t>::from_le_bytes(b[..std::mem::size_of::<$t>()].try_into().unwrap()) as f64
            };
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => le!(i16),
            Scalar::U16 => le!(u16),
            Scalar::I32 => le!(i32),
            Scalar::U32 => le!(u32),
            Scalar::I64 => le!(i64),
            Scalar::U64 => le!(u64),
            Scalar::F32 => le!(f32),
            Scalar::F64 => le!(f64),
        }
    }

    /// Parses an ASCII token at this scalar's precision, so a float32
    /// field read back from text matches the value a binary file holds.
    fn parse_text(self, tok: &str) -> Option<f64> {
        match self {
            Scalar::F32 => tok.parse::<f32>().ok().map(f64::from),
            _ => tok.parse::<f64>().ok(),
        }
    }

    /// Raw little-endian bits widened to u64; used for packed colors.
    fn read_bits_le(self, b: &[u8]) -> u64 {
        let mut buf = [0u8; 8];
        buf[..self.size()].copy_from_slice(&b[..self.size()]);
        u64::from_le_bytes(buf)
    }
}

fn unpack_rgb(packed: u64) -> Rgb {
    [
        ((packed >> 16) & 0xff) as u8,
        ((packed >> 8) & 0xff) as u8,
        (packed & 0xff) as u8,
    ]
}

fn pack_rgb(c: Rgb) -> u32 {
    (u32::from(c[0]) << 16) | (u32::from(c[1]) << 8) | u32::from(c[2])
}
