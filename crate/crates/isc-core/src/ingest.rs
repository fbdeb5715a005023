//! Scan file parsing, intensity calibration, and cloud filtering.
//!
//! Raw sensor returns carry an uncalibrated reflectance value whose magnitude
//! depends on range. This module reads raw scans (KITTI packed binary or plain
//! ASCII), applies an optional distance-dependent gain curve, rescales the
//! reading into `[0,1]`, and drops unreliable points (beyond the maximum
//! radius, or below a ground height threshold).

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

/// One raw return: sensor-frame position plus the uncalibrated intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity_raw: f64,
}

/// A scan as read from disk, in file order, before calibration.
#[derive(Debug, Clone, Default)]
pub struct RawScan {
    pub points: Vec<RawPoint>,
}

/// One calibrated point; intensity is in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f32,
}

impl Point {
    /// Planar range in the x-y plane.
    pub fn planar_range(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Full 3D range from the sensor origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// A calibrated, filtered point cloud.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated record: file length {len} is not a multiple of 16 bytes")]
    TruncatedRecord { len: u64 },
    #[error("non-finite value in point {index}")]
    NonFinite { index: usize },
    #[error("negative intensity {value} in point {index}")]
    NegativeIntensity { index: usize, value: f64 },
    #[error("line {line}: expected \"x y z intensity\", got {found} fields")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: unparsable number {text:?}")]
    BadNumber { line: usize, text: String },
    #[error("calibration curve needs at least one (distance, gain) sample")]
    EmptyCalibration,
    #[error("calibration distances must be strictly increasing (sample {index})")]
    NonIncreasingDistance { index: usize },
    #[error("calibration gain must be positive (sample {index}, gain {gain})")]
    NonPositiveGain { index: usize, gain: f64 },
    #[error("invalid ingest config: {reason}")]
    InvalidConfig { reason: String },
    #[error("unsupported scan extension {ext:?} for {path}")]
    UnknownFormat { path: String, ext: String },
}

/// Distance-dependent intensity gain, piecewise-linear between samples.
///
/// Outside the sampled range the nearest endpoint gain is used, so the curve
/// is total over all nonnegative distances.
#[derive(Debug, Clone)]
pub struct CalibrationCurve {
    samples: Vec<(f64, f64)>,
}

impl CalibrationCurve {
    /// Validates that distances are strictly increasing and gains positive.
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self, IngestError> {
        if samples.is_empty() {
            return Err(IngestError::EmptyCalibration);
        }
        for (i, &(d, g)) in samples.iter().enumerate() {
            if !d.is_finite() || !g.is_finite() {
                return Err(IngestError::NonFinite { index: i });
            }
            if g <= 0.0 {
                return Err(IngestError::NonPositiveGain { index: i, gain: g });
            }
            if i > 0 && d <= samples[i - 1].0 {
                return Err(IngestError::NonIncreasingDistance { index: i });
            }
        }
        Ok(Self { samples })
    }

    /// Loads a curve from a two-column text file (`distance_m gain`), with
    /// `#` comment lines allowed.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut samples = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| IngestError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(IngestError::FieldCount {
                    line: line_no,
                    found: fields.len(),
                });
            }
            let mut parsed = [0.0f64; 2];
            for (slot, text) in parsed.iter_mut().zip(&fields) {
                *slot = text.parse().map_err(|_| IngestError::BadNumber {
                    line: line_no,
                    text: (*text).to_string(),
                })?;
            }
            samples.push((parsed[0], parsed[1]));
        }
        Self::new(samples)
    }

    /// Gain at distance `d`, clamped to the endpoint gains outside the
    /// sampled range.
    pub fn gain(&self, d: f64) -> f64 {
        let samples = &self.samples;
        if d <= samples[0].0 {
            return samples[0].1;
        }
        if d >= samples[samples.len() - 1].0 {
            return samples[samples.len() - 1].1;
        }
        // Index of the first sample with distance > d; d is strictly inside.
        let hi = samples.partition_point(|&(sd, _)| sd <= d);
        let (d0, g0) = samples[hi - 1];
        let (d1, g1) = samples[hi];
        let t = (d - d0) / (d1 - d0);
        g0 + t * (g1 - g0)
    }
}

/// Ground handling for [`filter_cloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMode {
    /// Keep all points.
    #[default]
    None,
    /// Drop points with `z < ground_z` (sensor frame).
    ZThreshold,
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Maximum planar radius; points farther out are dropped.
    pub l_max: f64,
    /// Divisor mapping the raw intensity toward `[0,1]`. KITTI reflectance is
    /// already a unit float, so the default is 1.0; 8-bit sensors use 255.0.
    pub intensity_scale: f64,
    pub ground_mode: GroundMode,
    pub ground_z: f64,
    pub calibration: Option<CalibrationCurve>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            l_max: 50.0,
            intensity_scale: 1.0,
            ground_mode: GroundMode::None,
            ground_z: -1.5,
            calibration: None,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.l_max <= 0.0 || !self.l_max.is_finite() {
            return Err(IngestError::InvalidConfig {
                reason: format!("l_max must be positive, got {}", self.l_max),
            });
        }
        if self.intensity_scale <= 0.0 || !self.intensity_scale.is_finite() {
            return Err(IngestError::InvalidConfig {
                reason: format!("intensity_scale must be positive, got {}", self.intensity_scale),
            });
        }
        Ok(())
    }
}

fn validate_point(index: usize, p: &RawPoint) -> Result<(), IngestError> {
    let finite = p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity_raw.is_finite();
    if !finite {
        return Err(IngestError::NonFinite { index });
    }
    if p.intensity_raw < 0.0 {
        return Err(IngestError::NegativeIntensity {
            index,
            value: p.intensity_raw,
        });
    }
    Ok(())
}

/// Reads a packed binary scan: four little-endian IEEE-754 float32 per point
/// (x, y, z, reflectance), no header.
pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<RawScan, IngestError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() % 16 != 0 {
        return Err(IngestError::TruncatedRecord {
            len: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (index, rec) in bytes.chunks_exact(16).enumerate() {
        let field = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        let p = RawPoint {
            x: field(0) as f64,
            y: field(1) as f64,
            z: field(2) as f64,
            intensity_raw: field(3) as f64,
        };
        validate_point(index, &p)?;
        points.push(p);
    }
    Ok(RawScan { points })
}

/// Writes a scan in the packed binary layout [`read_kitti_bin`] reads.
/// Coordinates and intensity are narrowed to float32.
pub fn write_kitti_bin(path: impl AsRef<Path>, scan: &RawScan) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(scan.points.len() * 16);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity_raw] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an ASCII cloud: one `x y z intensity` record per line, `#` comments
/// and blank lines ignored.
pub fn read_ascii_cloud(path: impl AsRef<Path>) -> Result<RawScan, IngestError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut points = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(IngestError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let mut parsed = [0.0f64; 4];
        for (slot, text) in parsed.iter_mut().zip(&fields) {
            *slot = text.parse().map_err(|_| IngestError::BadNumber {
                line: line_no,
                text: (*text).to_string(),
            })?;
        }
        let p = RawPoint {
            x: parsed[0],
            y: parsed[1],
            z: parsed[2],
            intensity_raw: parsed[3],
        };
        validate_point(points.len(), &p)?;
        points.push(p);
    }
    Ok(RawScan { points })
}

/// Applies the gain curve and rescaling, clamping every intensity into `[0,1]`.
///
/// The gain is evaluated at the full 3D range, since received energy depends
/// on total beam travel.
pub fn calibrate_intensity(raw: &RawScan, cfg: &IngestConfig) -> PointCloud {
    let points = raw
        .points
        .iter()
        .map(|p| {
            let gain = match &cfg.calibration {
                Some(curve) => {
                    let d = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
                    curve.gain(d)
                }
                None => 1.0,
            };
            let intensity = (p.intensity_raw / cfg.intensity_scale * gain).clamp(0.0, 1.0);
            Point {
                x: p.x,
                y: p.y,
                z: p.z,
                intensity: intensity as f32,
            }
        })
        .collect();
    PointCloud { points }
}

/// Drops points beyond `l_max` planar range and, when ground removal is on,
/// points below the ground height threshold. Input order is preserved.
pub fn filter_cloud(mut cloud: PointCloud, cfg: &IngestConfig) -> PointCloud {
    cloud.points.retain(|p| {
        if p.planar_range() > cfg.l_max {
            return false;
        }
        match cfg.ground_mode {
            GroundMode::None => true,
            GroundMode::ZThreshold => p.z >= cfg.ground_z,
        }
    });
    cloud
}

/// Reads, calibrates, and filters a scan file, dispatching on extension:
/// `.bin` is packed binary, `.txt`/`.xyz`/`.asc` is ASCII.
pub fn load_scan(path: impl AsRef<Path>, cfg: &IngestConfig) -> Result<PointCloud, IngestError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let raw = match ext.as_str() {
        "bin" => read_kitti_bin(path)?,
        "txt" | "xyz" | "asc" => read_ascii_cloud(path)?,
        other => {
            return Err(IngestError::UnknownFormat {
                path: path.display().to_string(),
                ext: other.to_string(),
            })
        }
    };
    Ok(filter_cloud(calibrate_intensity(&raw, cfg), cfg))
}
