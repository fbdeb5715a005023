//! C ABI for the loop closure detection engine.
//!
//! Conventions:
//! - Every fallible call returns an [`IscStatus`] and writes results
//!   through out-pointers only on success; buffer-filling calls also
//!   report the full record count on `ISC_STATUS_BUFFER_TOO_SMALL`.
//! - The engine is an opaque handle: build one with [`isc_engine_new`],
//!   [`isc_engine_new_from_file`], or [`isc_engine_new_with_database`] and
//!   release it with [`isc_engine_free`]. A handle is not thread-safe;
//!   callers serialize access to it.
//! - Scans enter as interleaved `x y z intensity` float quadruplets, the
//!   packed layout sensor logs commonly use.
//! - A panic inside the library is caught and reported as
//!   `ISC_STATUS_PANIC`; an engine that returned it is in an unknown state
//!   and must only be freed.
//!
//! The generated header lands in `include/isc.h` at build time.

use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use isc_core::descriptor::Isc;
use isc_core::engine::{
    Detection, Engine, EngineConfig, EngineError, REASON_HISTORY, REASON_ICP, REASON_TEMPORAL,
};
use isc_core::ingest::{calibrate_intensity, filter_cloud, GroundMode, RawPoint, RawScan};
use isc_core::retrieval::{DbError, DescriptorDb};

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IscStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was malformed: a path that is not valid UTF-8, a
    /// descriptor shape that does not fit the target, or similar.
    InvalidArgument = 2,
    /// The configuration failed validation or did not parse.
    InvalidConfig = 3,
    /// The operating system reported an I/O failure.
    Io = 4,
    /// The file is not readable as a descriptor database.
    CorruptDatabase = 5,
    /// The output buffer cannot hold every record; the reported count is
    /// the required capacity and records past the end were dropped.
    BufferTooSmall = 6,
    /// An internal panic was caught; free the engine, do not reuse it.
    Panic = 7,
}

/// Ground point handling during ingest.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IscGroundMode {
    /// Keep every point.
    None = 0,
    /// Drop points below the configured height threshold.
    ZThreshold = 1,
}

/// Engine settings, mirroring the `key = value` configuration file except
/// for the calibration curve, which only the file constructor can supply.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IscConfig {
    /// Descriptor ring (range bin) count.
    pub n_rings: u32,
    /// Descriptor sector (azimuth bin) count.
    pub n_sectors: u32,
    /// Maximum planar range covered by the descriptor, meters.
    pub l_max: f64,
    /// Divisor applied to raw intensities before calibration.
    pub intensity_scale: f64,
    /// Ground point handling during ingest.
    pub ground_mode: IscGroundMode,
    /// Height threshold for `ISC_GROUND_MODE_Z_THRESHOLD`, meters.
    pub ground_z: f64,
    /// Geometric agreement threshold for retrieval stage one.
    pub eps_geometry: f64,
    /// Intensity similarity threshold for retrieval stage two.
    pub eps_intensity: f64,
    /// Most recent frames excluded from the search.
    pub exclusion_window: u32,
    /// Neighbor pairs in the temporal consistency window.
    pub n_temporal: u32,
    /// Temporal consistency acceptance threshold, in [0,2].
    pub xi: f64,
    /// Whether to run ICP verification (stores point clouds).
    pub enable_icp: bool,
    /// ICP iteration cap.
    pub icp_max_iter: u32,
    /// ICP stops once the residual improves by less than this.
    pub icp_tol: f64,
    /// ICP correspondence distance cutoff, meters.
    pub icp_max_corr_dist: f64,
    /// Maximum ICP residual for acceptance, meters.
    pub icp_max_rms: f64,
    /// Keep every n-th point of the stored clouds (1 = keep all).
    pub icp_subsample_stride: u32,
    /// Distance under which a detection scores as a true loop, meters.
    pub loop_dist: f64,
}

/// Why a detection was rejected.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IscRejection {
    /// The detection was accepted.
    NotRejected = 0,
    /// Too little history around the match for the temporal check.
    InsufficientHistory = 1,
    /// The temporal consistency score fell below the threshold.
    Temporal = 2,
    /// The registration residual exceeded its bound.
    Icp = 3,
    /// A reason this header predates; treat as rejected.
    Other = 4,
}

/// One loop closure decision.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IscDetection {
    /// Query frame id (insertion order, starting at 0).
    pub query: u64,
    /// Matched candidate frame id.
    pub candidate: u64,
    /// Descriptor column rotation selected by the alignment search.
    pub shift: u32,
    /// Initial yaw handed to registration, radians in [-pi, pi).
    pub yaw_init: f64,
    /// Whether the revisit runs opposite to the original travel direction.
    pub reverse: bool,
    /// Whether the detection was accepted.
    pub accepted: bool,
    /// Whether `temporal_score` holds a value.
    pub has_temporal_score: bool,
    /// Mean combined similarity over the temporal window, in [0,2].
    pub temporal_score: f64,
    /// Whether `icp_rms` holds a value.
    pub has_icp_rms: bool,
    /// Root-mean-square registration residual, meters.
    pub icp_rms: f64,
    /// Rejection reason, `ISC_REJECTION_NOT_REJECTED` when accepted.
    pub rejection: IscRejection,
}

/// Opaque streaming detector; see the crate docs for the lifecycle.
pub struct IscEngine {
    inner: Engine,
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn isc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn isc_status_message(status: IscStatus) -> *const c_char {
    let message: &CStr = match status {
        IscStatus::Ok => c"ok",
        IscStatus::NullPointer => c"a required pointer argument was null",
        IscStatus::InvalidArgument => c"malformed argument",
        IscStatus::InvalidConfig => c"configuration failed validation or did not parse",
        IscStatus::Io => c"I/O failure",
        IscStatus::CorruptDatabase => c"not readable as a descriptor database",
        IscStatus::BufferTooSmall => c"output buffer too small; the count reports the required capacity",
        IscStatus::Panic => c"internal panic; the engine must only be freed",
    };
    message.as_ptr()
}

fn engine_status(e: &EngineError) -> IscStatus {
    match e {
        EngineError::InvalidConfig { .. }
        | EngineError::ConfigSyntax { .. }
        | EngineError::Calibration(_) => IscStatus::InvalidConfig,
        EngineError::ConfigIo { .. } => IscStatus::Io,
        EngineError::Database(db) => db_status(db),
    }
}

fn db_status(e: &DbError) -> IscStatus {
    match e {
        DbError::Io(_) => IscStatus::Io,
        DbError::ShapeMismatch { .. } => IscStatus::InvalidArgument,
        DbError::BadMagic | DbError::BadHeader { .. } | DbError::MaskMismatch { .. } | DbError::TrailingData => {
            IscStatus::CorruptDatabase
        }
    }
}

fn engine_config(c: &IscConfig) -> EngineConfig {
    EngineConfig {
        n_rings: c.n_rings as usize,
        n_sectors: c.n_sectors as usize,
        l_max: c.l_max,
        intensity_scale: c.intensity_scale,
        ground_mode: match c.ground_mode {
            IscGroundMode::None => GroundMode::None,
            IscGroundMode::ZThreshold => GroundMode::ZThreshold,
        },
        ground_z: c.ground_z,
        calibration_file: None,
        eps_geometry: c.eps_geometry,
        eps_intensity: c.eps_intensity,
        exclusion_window: c.exclusion_window as usize,
        n_temporal: c.n_temporal as usize,
        xi: c.xi,
        enable_icp: c.enable_icp,
        icp_max_iter: c.icp_max_iter as usize,
        icp_tol: c.icp_tol,
        icp_max_corr_dist: c.icp_max_corr_dist,
        icp_max_rms: c.icp_max_rms,
        icp_subsample_stride: c.icp_subsample_stride as usize,
        loop_dist: c.loop_dist,
    }
}

fn c_config(c: &EngineConfig) -> IscConfig {
    IscConfig {
        n_rings: c.n_rings as u32,
        n_sectors: c.n_sectors as u32,
        l_max: c.l_max,
        intensity_scale: c.intensity_scale,
        ground_mode: match c.ground_mode {
            GroundMode::None => IscGroundMode::None,
            GroundMode::ZThreshold => IscGroundMode::ZThreshold,
        },
        ground_z: c.ground_z,
        eps_geometry: c.eps_geometry,
        eps_intensity: c.eps_intensity,
        exclusion_window: c.exclusion_window as u32,
        n_temporal: c.n_temporal as u32,
        xi: c.xi,
        enable_icp: c.enable_icp,
        icp_max_iter: c.icp_max_iter as u32,
        icp_tol: c.icp_tol,
        icp_max_corr_dist: c.icp_max_corr_dist,
        icp_max_rms: c.icp_max_rms,
        icp_subsample_stride: c.icp_subsample_stride as u32,
        loop_dist: c.loop_dist,
    }
}

fn c_detection(d: &Detection) -> IscDetection {
    IscDetection {
        query: d.query,
        candidate: d.candidate,
        shift: d.shift as u32,
        yaw_init: d.yaw_init,
        reverse: d.reverse,
        accepted: d.accepted,
        has_temporal_score: d.temporal_score.is_some(),
        temporal_score: d.temporal_score.unwrap_or(0.0),
        has_icp_rms: d.icp_rms.is_some(),
        icp_rms: d.icp_rms.unwrap_or(0.0),
        rejection: match d.reason.as_deref() {
            None => IscRejection::NotRejected,
            Some(REASON_HISTORY) => IscRejection::InsufficientHistory,
            Some(REASON_TEMPORAL) => IscRejection::Temporal,
            Some(REASON_ICP) => IscRejection::Icp,
            Some(_) => IscRejection::Other,
        },
    }
}

/// # Safety
/// `path` must be a valid nul-terminated string.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, IscStatus> {
    if path.is_null() {
        return Err(IscStatus::NullPointer);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(IscStatus::InvalidArgument),
    }
}

/// # Safety
/// `points` must reference `4 * n_points` readable floats when `n_points`
/// is nonzero.
unsafe fn scan_arg(points: *const f32, n_points: usize) -> Result<RawScan, IscStatus> {
    if n_points == 0 {
        return Ok(RawScan::default());
    }
    if points.is_null() {
        return Err(IscStatus::NullPointer);
    }
    let floats = slice::from_raw_parts(points, n_points * 4);
    Ok(RawScan {
        points: floats
            .chunks_exact(4)
            .map(|p| RawPoint {
                x: f64::from(p[0]),
                y: f64::from(p[1]),
                z: f64::from(p[2]),
                intensity_raw: f64::from(p[3]),
            })
            .collect(),
    })
}

/// Copies records into the caller's buffer. The count is always written;
/// records past `capacity` are dropped and reported via the status.
///
/// # Safety
/// `out` must reference `capacity` writable records (it may be null when
/// `capacity` is 0), `out_count` one writable count.
unsafe fn fill_detections(
    records: &[Detection],
    out: *mut IscDetection,
    capacity: usize,
    out_count: *mut usize,
) -> IscStatus {
    out_count.write(records.len());
    let n = records.len().min(capacity);
    if n > 0 && out.is_null() {
        return IscStatus::NullPointer;
    }
    for (i, d) in records.iter().take(n).enumerate() {
        out.add(i).write(c_detection(d));
    }
    if records.len() > capacity {
        IscStatus::BufferTooSmall
    } else {
        IscStatus::Ok
    }
}

/// Writes the default configuration.
///
/// # Safety
/// `out` must point to a writable `IscConfig`.
#[no_mangle]
pub unsafe extern "C" fn isc_config_default(out: *mut IscConfig) -> IscStatus {
    if out.is_null() {
        return IscStatus::NullPointer;
    }
    out.write(c_config(&EngineConfig::default()));
    IscStatus::Ok
}

/// Creates an engine from an in-memory configuration.
///
/// # Safety
/// `config` must point to a readable `IscConfig`, `out` to a writable
/// engine pointer.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_new(
    config: *const IscConfig,
    out: *mut *mut IscEngine,
) -> IscStatus {
    let Some(config) = config.as_ref() else {
        return IscStatus::NullPointer;
    };
    if out.is_null() {
        return IscStatus::NullPointer;
    }
    match catch_unwind(|| Engine::new(engine_config(config))) {
        Ok(Ok(inner)) => {
            out.write(Box::into_raw(Box::new(IscEngine { inner })));
            IscStatus::Ok
        }
        Ok(Err(e)) => engine_status(&e),
        Err(_) => IscStatus::Panic,
    }
}

/// Creates an engine from a `key = value` configuration file. This is the
/// only constructor that can attach an intensity calibration curve.
///
/// # Safety
/// `path` must be a valid nul-terminated string, `out` a writable engine
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_new_from_file(
    path: *const c_char,
    out: *mut *mut IscEngine,
) -> IscStatus {
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    if out.is_null() {
        return IscStatus::NullPointer;
    }
    match catch_unwind(|| EngineConfig::from_key_value_file(path).and_then(Engine::new)) {
        Ok(Ok(inner)) => {
            out.write(Box::into_raw(Box::new(IscEngine { inner })));
            IscStatus::Ok
        }
        Ok(Err(e)) => engine_status(&e),
        Err(_) => IscStatus::Panic,
    }
}

/// Creates an engine preloaded with a saved descriptor database. The
/// configured grid must match the stored one. Frame ids continue from the
/// stored count; stored frames are searchable but, having no point clouds,
/// any match against them skips registration.
///
/// # Safety
/// `config` must point to a readable `IscConfig`, `db_path` to a valid
/// nul-terminated string, `out` to a writable engine pointer.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_new_with_database(
    config: *const IscConfig,
    db_path: *const c_char,
    out: *mut *mut IscEngine,
) -> IscStatus {
    let Some(config) = config.as_ref() else {
        return IscStatus::NullPointer;
    };
    let db_path = match path_arg(db_path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    if out.is_null() {
        return IscStatus::NullPointer;
    }
    let built = catch_unwind(|| {
        let db = DescriptorDb::load_path(db_path)?;
        Engine::with_database(engine_config(config), db)
    });
    match built {
        Ok(Ok(inner)) => {
            out.write(Box::into_raw(Box::new(IscEngine { inner })));
            IscStatus::Ok
        }
        Ok(Err(e)) => engine_status(&e),
        Err(_) => IscStatus::Panic,
    }
}

/// Destroys an engine. Null is a no-op.
///
/// # Safety
/// `engine` must be a pointer from one of the constructors, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_free(engine: *mut IscEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Writes the engine's effective configuration (the calibration curve, if
/// any, is not representable here and is omitted).
///
/// # Safety
/// `engine` must be a live engine pointer, `out` a writable `IscConfig`.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_config(
    engine: *const IscEngine,
    out: *mut IscConfig,
) -> IscStatus {
    let Some(engine) = engine.as_ref() else {
        return IscStatus::NullPointer;
    };
    if out.is_null() {
        return IscStatus::NullPointer;
    }
    out.write(c_config(engine.inner.config()));
    IscStatus::Ok
}

/// Frames stored in the database so far. Null reads as 0.
///
/// # Safety
/// `engine` must be a live engine pointer or null.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_size(engine: *const IscEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.len())
}

/// Reverse matches still waiting for the frames after their query. A
/// detection buffer of `1 + isc_engine_pending()` records is always enough
/// for one call. Null reads as 0.
///
/// # Safety
/// `engine` must be a live engine pointer or null.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_pending(engine: *const IscEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.inner.pending())
}

/// Feeds the next scan (interleaved `x y z intensity` quadruplets) and
/// collects the loop closure decisions it settles. The frame takes the
/// next id in insertion order.
///
/// # Safety
/// `engine` must be a live engine pointer; `points` must reference
/// `4 * n_points` readable floats when `n_points` is nonzero;
/// `out_detections` must reference `capacity` writable records; and
/// `out_count` one writable count.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_process_scan(
    engine: *mut IscEngine,
    points: *const f32,
    n_points: usize,
    out_detections: *mut IscDetection,
    capacity: usize,
    out_count: *mut usize,
) -> IscStatus {
    let Some(engine) = engine.as_mut() else {
        return IscStatus::NullPointer;
    };
    if out_count.is_null() {
        return IscStatus::NullPointer;
    }
    let raw = match scan_arg(points, n_points) {
        Ok(raw) => raw,
        Err(status) => return status,
    };
    match catch_unwind(AssertUnwindSafe(|| engine.inner.process_raw(&raw))) {
        Ok(records) => fill_detections(&records, out_detections, capacity, out_count),
        Err(_) => IscStatus::Panic,
    }
}

/// Flushes reverse matches that will never get their verification window,
/// rejecting them. Call once the sequence is exhausted.
///
/// # Safety
/// `engine` must be a live engine pointer; `out_detections` must reference
/// `capacity` writable records; `out_count` one writable count.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_finish(
    engine: *mut IscEngine,
    out_detections: *mut IscDetection,
    capacity: usize,
    out_count: *mut usize,
) -> IscStatus {
    let Some(engine) = engine.as_mut() else {
        return IscStatus::NullPointer;
    };
    if out_count.is_null() {
        return IscStatus::NullPointer;
    }
    match catch_unwind(AssertUnwindSafe(|| engine.inner.finish())) {
        Ok(records) => fill_detections(&records, out_detections, capacity, out_count),
        Err(_) => IscStatus::Panic,
    }
}

/// Saves the descriptor database for a later
/// [`isc_engine_new_with_database`].
///
/// # Safety
/// `engine` must be a live engine pointer, `path` a valid nul-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn isc_engine_save_database(
    engine: *const IscEngine,
    path: *const c_char,
) -> IscStatus {
    let Some(engine) = engine.as_ref() else {
        return IscStatus::NullPointer;
    };
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match catch_unwind(AssertUnwindSafe(|| engine.inner.database().save_path(path))) {
        Ok(Ok(())) => IscStatus::Ok,
        Ok(Err(e)) => db_status(&e),
        Err(_) => IscStatus::Panic,
    }
}

/// Computes one scan's descriptor without touching any engine:
/// `n_rings * n_sectors` cells, row-major, each the maximum calibrated
/// intensity of its polar segment. `capacity` is in cells.
///
/// # Safety
/// `config` must point to a readable `IscConfig`; `points` must reference
/// `4 * n_points` readable floats when `n_points` is nonzero; `out_cells`
/// must reference `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn isc_describe_scan(
    config: *const IscConfig,
    points: *const f32,
    n_points: usize,
    out_cells: *mut f32,
    capacity: usize,
) -> IscStatus {
    let Some(config) = config.as_ref() else {
        return IscStatus::NullPointer;
    };
    let raw = match scan_arg(points, n_points) {
        Ok(raw) => raw,
        Err(status) => return status,
    };
    let cfg = engine_config(config);
    if cfg.validate().is_err() {
        return IscStatus::InvalidConfig;
    }
    let needed = cfg.n_rings * cfg.n_sectors;
    if capacity < needed {
        return IscStatus::BufferTooSmall;
    }
    if out_cells.is_null() {
        return IscStatus::NullPointer;
    }
    let built = catch_unwind(|| {
        let ingest = cfg.ingest()?;
        let cloud = filter_cloud(calibrate_intensity(&raw, &ingest), &ingest);
        Ok::<_, EngineError>(Isc::from_cloud(&cloud, &cfg.grid()))
    });
    match built {
        Ok(Ok(isc)) => {
            let cells = isc.cells();
            slice::from_raw_parts_mut(out_cells, needed).copy_from_slice(cells);
            IscStatus::Ok
        }
        Ok(Err(e)) => engine_status(&e),
        Err(_) => IscStatus::Panic,
    }
}
