//! The online loop closure engine.
//!
//! Scans stream in one at a time. For each scan the engine extracts the
//! descriptor, searches the frames stored so far (minus a recency exclusion
//! window), verifies any retrieved candidate, and then appends the scan to
//! the store. Forward revisits are verified on the spot from the frames
//! behind the query. A reverse revisit needs frames the sensor has not
//! produced yet, so its verification is parked in a queue and resolved once
//! enough later frames have arrived; a sequence that ends first flushes the
//! queue as rejections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{GridParams, Isc};
use crate::ingest::{
    calibrate_intensity, filter_cloud, CalibrationCurve, GroundMode, IngestConfig, IngestError,
    PointCloud, RawScan,
};
use crate::retrieval::{query_database, DbError, DescriptorDb, SearchParams};
use crate::verify::{
    icp_point_to_point, is_reverse, temporal_consistency, yaw_from_shift, IcpParams,
    TemporalParams,
};

/// Verification failed because the match window ran off the start of either
/// trajectory (or, for a deferred reverse match, off the end of the
/// sequence).
pub const REASON_HISTORY: &str = "insufficient-history";
/// Verification failed the temporal consistency threshold.
pub const REASON_TEMPORAL: &str = "temporal";
/// Verification failed the ICP residual threshold.
pub const REASON_ICP: &str = "icp";

/// Full engine configuration; parses from a flat `key = value` text file
/// with every key optional (see [`EngineConfig::from_key_values`]).
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Descriptor ring (range bin) count.
    pub n_rings: usize,
    /// Descriptor sector (azimuth bin) count.
    pub n_sectors: usize,
    /// Maximum planar range covered by the descriptor, in meters.
    pub l_max: f64,
    /// Divisor applied to raw intensities before calibration.
    pub intensity_scale: f64,
    /// Ground point handling during ingest.
    pub ground_mode: GroundMode,
    /// Height threshold for [`GroundMode::ZThreshold`], in meters.
    pub ground_z: f64,
    /// Optional two-column `distance gain` calibration curve file.
    pub calibration_file: Option<PathBuf>,
    /// Geometric agreement threshold for retrieval stage one.
    pub eps_geometry: f64,
    /// Intensity similarity threshold for retrieval stage two.
    pub eps_intensity: f64,
    /// Most recent frames excluded from the search.
    pub exclusion_window: usize,
    /// Neighbor pairs in the temporal consistency window.
    pub n_temporal: usize,
    /// Temporal consistency acceptance threshold, in `[0,2]`.
    pub xi: f64,
    /// Whether to run ICP verification (requires storing point clouds).
    pub enable_icp: bool,
    pub icp_max_iter: usize,
    /// ICP stops once the residual improves by less than this.
    pub icp_tol: f64,
    /// ICP correspondence distance cutoff, in meters.
    pub icp_max_corr_dist: f64,
    /// Maximum ICP residual for acceptance, in meters.
    pub icp_max_rms: f64,
    /// Keep every n-th point of the clouds stored for ICP verification
    /// (1 = keep all). Bounds the memory a long run holds onto.
    pub icp_subsample_stride: usize,
    /// Ground-truth distance under which a detection counts as correct
    /// during evaluation, in meters.
    pub loop_dist: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_rings: 60,
            n_sectors: 20,
            l_max: 50.0,
            intensity_scale: 1.0,
            ground_mode: GroundMode::None,
            ground_z: -1.5,
            calibration_file: None,
            eps_geometry: 0.9,
            eps_intensity: 0.92,
            exclusion_window: 50,
            n_temporal: 5,
            xi: 1.8,
            enable_icp: true,
            icp_max_iter: 30,
            icp_tol: 1e-4,
            icp_max_corr_dist: 2.0,
            icp_max_rms: 0.5,
            icp_subsample_stride: 1,
            loop_dist: 4.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("failed to read config {path}: {source}")]
    ConfigIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("loading calibration curve: {0}")]
    Calibration(#[source] IngestError),
    #[error("descriptor database does not fit this engine: {0}")]
    Database(#[from] DbError),
}

/// Parse one typed config value, reporting the offending text on failure.
fn config_value<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
) -> Result<T, EngineError> {
    value.parse().map_err(|_| EngineError::ConfigSyntax {
        line,
        reason: format!("bad value `{value}` for {key}"),
    })
}

impl EngineConfig {
    pub fn from_key_value_file(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EngineError::ConfigIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_key_values(&text)
    }

    /// Parse a flat `key = value` config, one setting per line.
    ///
    /// `#` starts a comment (whole-line or trailing), blank lines are
    /// skipped, and every key is optional — unset keys keep their defaults.
    /// Unknown and repeated keys are errors so a typo cannot silently fall
    /// back to a default. `calibration_file = none` clears the curve.
    pub fn from_key_values(text: &str) -> Result<Self, EngineError> {
        let mut config = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(EngineError::ConfigSyntax {
                    line,
                    reason: format!("expected `key = value`, got `{stripped}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(EngineError::ConfigSyntax {
                    line,
                    reason: format!("missing value for {key}"),
                });
            }
            if seen.contains(&key) {
                return Err(EngineError::ConfigSyntax {
                    line,
                    reason: format!("{key} set more than once"),
                });
            }
            seen.push(key);
            match key {
                "n_rings" => config.n_rings = config_value(key, value, line)?,
                "n_sectors" => config.n_sectors = config_value(key, value, line)?,
                "l_max" => config.l_max = config_value(key, value, line)?,
                "intensity_scale" => config.intensity_scale = config_value(key, value, line)?,
                "ground_mode" => {
                    config.ground_mode = match value {
                        "none" => GroundMode::None,
                        "z_threshold" => GroundMode::ZThreshold,
                        other => {
                            return Err(EngineError::ConfigSyntax {
                                line,
                                reason: format!(
                                    "ground_mode must be `none` or `z_threshold`, got `{other}`"
                                ),
                            })
                        }
                    }
                }
                "ground_z" => config.ground_z = config_value(key, value, line)?,
                "calibration_file" => {
                    config.calibration_file =
                        (value != "none").then(|| PathBuf::from(value));
                }
                "eps_geometry" => config.eps_geometry = config_value(key, value, line)?,
                "eps_intensity" => config.eps_intensity = config_value(key, value, line)?,
                "exclusion_window" => config.exclusion_window = config_value(key, value, line)?,
                "n_temporal" => config.n_temporal = config_value(key, value, line)?,
                "xi" => config.xi = config_value(key, value, line)?,
                "enable_icp" => config.enable_icp = config_value(key, value, line)?,
                "icp_max_iter" => config.icp_max_iter = config_value(key, value, line)?,
                "icp_tol" => config.icp_tol = config_value(key, value, line)?,
                "icp_max_corr_dist" => config.icp_max_corr_dist = config_value(key, value, line)?,
                "icp_max_rms" => config.icp_max_rms = config_value(key, value, line)?,
                "icp_subsample_stride" => {
                    config.icp_subsample_stride = config_value(key, value, line)?
                }
                "loop_dist" => config.loop_dist = config_value(key, value, line)?,
                other => {
                    return Err(EngineError::ConfigSyntax {
                        line,
                        reason: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Render the configuration in the same `key = value` form
    /// [`Self::from_key_values`] reads; parsing the output reproduces `self`.
    pub fn to_key_values(&self) -> String {
        let calibration = match &self.calibration_file {
            Some(path) => path.display().to_string(),
            None => "none".to_owned(),
        };
        let ground_mode = match self.ground_mode {
            GroundMode::None => "none",
            GroundMode::ZThreshold => "z_threshold",
        };
        format!(
            "n_rings = {}\nn_sectors = {}\nl_max = {}\nintensity_scale = {}\n\
             ground_mode = {}\nground_z = {}\ncalibration_file = {}\n\
             eps_geometry = {}\neps_intensity = {}\nexclusion_window = {}\n\
             n_temporal = {}\nxi = {}\nenable_icp = {}\nicp_max_iter = {}\n\
             icp_tol = {}\nicp_max_corr_dist = {}\nicp_max_rms = {}\n\
             icp_subsample_stride = {}\nloop_dist = {}\n",
            self.n_rings,
            self.n_sectors,
            self.l_max,
            self.intensity_scale,
            ground_mode,
            self.ground_z,
            calibration,
            self.eps_geometry,
            self.eps_intensity,
            self.exclusion_window,
            self.n_temporal,
            self.xi,
            self.enable_icp,
            self.icp_max_iter,
            self.icp_tol,
            self.icp_max_corr_dist,
            self.icp_max_rms,
            self.icp_subsample_stride,
            self.loop_dist,
        )
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |reason: String| Err(EngineError::InvalidConfig { reason });
        if let Err(reason) = self.grid().validate() {
            return fail(reason);
        }
        if self.intensity_scale <= 0.0 || !self.intensity_scale.is_finite() {
            return fail(format!("intensity_scale must be positive, got {}", self.intensity_scale));
        }
        for (name, v) in [("eps_geometry", self.eps_geometry), ("eps_intensity", self.eps_intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if !(self.xi > 0.0 && self.xi <= 2.0) {
            return fail(format!("xi must be in (0,2], got {}", self.xi));
        }
        if self.n_temporal == 0 {
            return fail("n_temporal must be at least 1".into());
        }
        if self.icp_max_iter == 0 {
            return fail("icp_max_iter must be at least 1".into());
        }
        if self.icp_subsample_stride == 0 {
            return fail("icp_subsample_stride must be at least 1".into());
        }
        for (name, v) in [
            ("icp_tol", self.icp_tol),
            ("icp_max_corr_dist", self.icp_max_corr_dist),
            ("icp_max_rms", self.icp_max_rms),
            ("loop_dist", self.loop_dist),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> GridParams {
        GridParams { n_rings: self.n_rings, n_sectors: self.n_sectors, l_max: self.l_max }
    }

    /// Ingest settings implied by this config, loading the calibration curve
    /// if one is referenced.
    pub fn ingest(&self) -> Result<IngestConfig, EngineError> {
        let calibration = match &self.calibration_file {
            Some(path) => {
                Some(CalibrationCurve::from_file(path).map_err(EngineError::Calibration)?)
            }
            None => None,
        };
        Ok(IngestConfig {
            l_max: self.l_max,
            intensity_scale: self.intensity_scale,
            ground_mode: self.ground_mode,
            ground_z: self.ground_z,
            calibration,
        })
    }

    pub fn search(&self) -> SearchParams {
        SearchParams { eps_geometry: self.eps_geometry, eps_intensity: self.eps_intensity }
    }

    pub fn temporal(&self) -> TemporalParams {
        TemporalParams { n_temporal: self.n_temporal, xi: self.xi }
    }

    pub fn icp(&self) -> IcpParams {
        IcpParams {
            max_iter: self.icp_max_iter,
            tol: self.icp_tol,
            max_corr_dist: self.icp_max_corr_dist,
        }
    }
}

/// One verification decision, as written to the detection log.
///
/// A record exists for every retrieved candidate that reached verification;
/// frames whose search came up empty produce no record. `temporal_score` and
/// `icp_rms` are `null` when that check did not run (or, for the residual,
/// produced no usable correspondences), and `reason` is `null` on acceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Query frame id.
    pub query: u64,
    /// Matched candidate frame id.
    pub candidate: u64,
    /// Descriptor column rotation selected by the alignment search.
    #[serde(rename = "k")]
    pub shift: usize,
    /// Initial yaw handed to ICP, radians in `[-pi, pi)`.
    pub yaw_init: f64,
    /// Whether the revisit runs opposite to the original travel direction.
    pub reverse: bool,
    pub temporal_score: Option<f64>,
    pub icp_rms: Option<f64>,
    pub accepted: bool,
    pub reason: Option<String>,
}

/// A reverse match waiting for the frames after its query to arrive.
#[derive(Debug, Clone)]
struct PendingReverse {
    query: usize,
    candidate: usize,
    shift: usize,
    yaw_init: f64,
    ready_at: usize,
}

/// Streaming loop closure detector; see the module docs for the frame
/// lifecycle.
#[derive(Debug)]
pub struct Engine {
    config: EngineConfig,
    ingest: IngestConfig,
    db: DescriptorDb,
    clouds: Vec<PointCloud>,
    pending: Vec<PendingReverse>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let ingest = config.ingest()?;
        let db = DescriptorDb::new(config.grid());
        Ok(Self { config, ingest, db, clouds: Vec::new(), pending: Vec::new() })
    }

    /// Starts from a previously saved descriptor database instead of an
    /// empty store. The stored frames carry no point clouds, so this
    /// requires ICP verification to be disabled.
    pub fn with_database(config: EngineConfig, db: DescriptorDb) -> Result<Self, EngineError> {
        config.validate()?;
        if config.enable_icp {
            return Err(EngineError::InvalidConfig {
                reason: "a loaded database has no point clouds; disable enable_icp to use one"
                    .into(),
            });
        }
        let grid = config.grid();
        if *db.params() != grid {
            return Err(EngineError::InvalidConfig {
                reason: format!(
                    "database grid {}x{} (l_max {}) does not match config {}x{} (l_max {})",
                    db.params().n_rings,
                    db.params().n_sectors,
                    db.params().l_max,
                    grid.n_rings,
                    grid.n_sectors,
                    grid.l_max
                ),
            });
        }
        let ingest = config.ingest()?;
        Ok(Self { config, ingest, db, clouds: Vec::new(), pending: Vec::new() })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Frames stored so far (including any loaded database).
    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }

    /// Reverse matches still waiting for future frames.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn database(&self) -> &DescriptorDb {
        &self.db
    }

    /// Calibrates and filters a raw scan, then processes it.
    pub fn process_raw(&mut self, raw: &RawScan) -> Vec<Detection> {
        let cloud = filter_cloud(calibrate_intensity(raw, &self.ingest), &self.ingest);
        self.process_cloud(cloud)
    }

    /// Processes one already calibrated and filtered cloud, returning every
    /// verification decision made at this step: the current frame's own (for
    /// a forward match) plus any deferred reverse matches that became
    /// resolvable.
    pub fn process_cloud(&mut self, cloud: PointCloud) -> Vec<Detection> {
        let position = self.db.len();
        let isc = Isc::from_cloud(&cloud, &self.config.grid());

        // Search before inserting, so the query can never retrieve itself
        // and the exclusion window counts strictly older frames.
        let search_end = position.saturating_sub(self.config.exclusion_window);
        let hit = query_database(&self.db.entries()[..search_end], &isc, &self.config.search());

        self.db
            .push(position as u64, isc)
            .expect("engine-built descriptor always matches the database grid");
        if self.config.enable_icp {
            let stride = self.config.icp_subsample_stride;
            let stored = if stride > 1 {
                PointCloud {
                    points: cloud.points.iter().copied().step_by(stride).collect(),
                }
            } else {
                cloud
            };
            self.clouds.push(stored);
        }

        let mut records = Vec::new();
        if let Some(hit) = hit {
            let yaw_init = yaw_from_shift(hit.shift, self.config.n_sectors);
            if is_reverse(yaw_init) {
                self.pending.push(PendingReverse {
                    query: position,
                    candidate: hit.position,
                    shift: hit.shift,
                    yaw_init,
                    ready_at: position + self.config.n_temporal,
                });
            } else {
                records.push(self.verify(position, hit.position, hit.shift, yaw_init, false));
            }
        }

        // Resolve deferred reverse matches whose windows are now complete.
        let now = position;
        let due: Vec<PendingReverse> =
            self.pending.extract_if(.., |p| p.ready_at <= now).collect();
        for p in due {
            records.push(self.verify(p.query, p.candidate, p.shift, p.yaw_init, true));
        }
        records
    }

    /// Flushes deferred reverse matches that will never get their window,
    /// rejecting them. Call once the sequence is exhausted.
    pub fn finish(&mut self) -> Vec<Detection> {
        let pending = std::mem::take(&mut self.pending);
        pending
            .into_iter()
            .map(|p| Detection {
                query: self.frame_id(p.query),
                candidate: self.frame_id(p.candidate),
                shift: p.shift,
                yaw_init: p.yaw_init,
                reverse: true,
                temporal_score: None,
                icp_rms: None,
                accepted: false,
                reason: Some(REASON_HISTORY.into()),
            })
            .collect()
    }

    fn frame_id(&self, position: usize) -> u64 {
        self.db.entries()[position].frame
    }

    fn verify(
        &mut self,
        query: usize,
        candidate: usize,
        shift: usize,
        yaw_init: f64,
        reverse: bool,
    ) -> Detection {
        let mut record = Detection {
            query: self.frame_id(query),
            candidate: self.frame_id(candidate),
            shift,
            yaw_init,
            reverse,
            temporal_score: None,
            icp_rms: None,
            accepted: false,
            reason: None,
        };

        let temporal = temporal_consistency(
            self.db.entries(),
            query,
            candidate,
            reverse,
            &self.config.temporal(),
        );
        let Some(score) = temporal else {
            record.reason = Some(REASON_HISTORY.into());
            return record;
        };
        record.temporal_score = Some(score);
        if score < self.config.xi {
            record.reason = Some(REASON_TEMPORAL.into());
            return record;
        }

        if !self.config.enable_icp {
            record.accepted = true;
            return record;
        }

        let icp = icp_point_to_point(
            &self.clouds[query],
            &self.clouds[candidate],
            yaw_init,
            &self.config.icp(),
        );
        if icp.rms.is_finite() {
            record.icp_rms = Some(icp.rms);
        }
        if icp.rms <= self.config.icp_max_rms {
            record.accepted = true;
        } else {
            record.reason = Some(REASON_ICP.into());
        }
        record
    }
}
