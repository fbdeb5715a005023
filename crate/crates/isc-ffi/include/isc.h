/* C interface for the loop closure detection engine. Generated; do not edit. */

#ifndef ISC_H
#define ISC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call.
 */
typedef enum IscStatus {
  /**
   * Success.
   */
  ISC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ISC_STATUS_NULL_POINTER = 1,
  /**
   * An argument was malformed: a path that is not valid UTF-8, a
   * descriptor shape that does not fit the target, or similar.
   */
  ISC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The configuration failed validation or did not parse.
   */
  ISC_STATUS_INVALID_CONFIG = 3,
  /**
   * The operating system reported an I/O failure.
   */
  ISC_STATUS_IO = 4,
  /**
   * The file is not readable as a descriptor database.
   */
  ISC_STATUS_CORRUPT_DATABASE = 5,
  /**
   * The output buffer cannot hold every record; the reported count is
   * the required capacity and records past the end were dropped.
   */
  ISC_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * An internal panic was caught; free the engine, do not reuse it.
   */
  ISC_STATUS_PANIC = 7,
} IscStatus;

/**
 * Ground point handling during ingest.
 */
typedef enum IscGroundMode {
  /**
   * Keep every point.
   */
  ISC_GROUND_MODE_NONE = 0,
  /**
   * Drop points below the configured height threshold.
   */
  ISC_GROUND_MODE_Z_THRESHOLD = 1,
} IscGroundMode;

/**
 * Why a detection was rejected.
 */
typedef enum IscRejection {
  /**
   * The detection was accepted.
   */
  ISC_REJECTION_NOT_REJECTED = 0,
  /**
   * Too little history around the match for the temporal check.
   */
  ISC_REJECTION_INSUFFICIENT_HISTORY = 1,
  /**
   * The temporal consistency score fell below the threshold.
   */
  ISC_REJECTION_TEMPORAL = 2,
  /**
   * The registration residual exceeded its bound.
   */
  ISC_REJECTION_ICP = 3,
  /**
   * A reason this header predates; treat as rejected.
   */
  ISC_REJECTION_OTHER = 4,
} IscRejection;

/**
 * Opaque streaming detector; see the crate docs for the lifecycle.
 */
typedef struct IscEngine IscEngine;

/**
 * Engine settings, mirroring the `key = value` configuration file except
 * for the calibration curve, which only the file constructor can supply.
 */
typedef struct IscConfig {
  /**
   * Descriptor ring (range bin) count.
   */
  uint32_t n_rings;
  /**
   * Descriptor sector (azimuth bin) count.
   */
  uint32_t n_sectors;
  /**
   * Maximum planar range covered by the descriptor, meters.
   */
  double l_max;
  /**
   * Divisor applied to raw intensities before calibration.
   */
  double intensity_scale;
  /**
   * Ground point handling during ingest.
   */
  enum IscGroundMode ground_mode;
  /**
   * Height threshold for `ISC_GROUND_MODE_Z_THRESHOLD`, meters.
   */
  double ground_z;
  /**
   * Geometric agreement threshold for retrieval stage one.
   */
  double eps_geometry;
  /**
   * Intensity similarity threshold for retrieval stage two.
   */
  double eps_intensity;
  /**
   * Most recent frames excluded from the search.
   */
  uint32_t exclusion_window;
  /**
   * Neighbor pairs in the temporal consistency window.
   */
  uint32_t n_temporal;
  /**
   * Temporal consistency acceptance threshold, in [0,2].
   */
  double xi;
  /**
   * Whether to run ICP verification (stores point clouds).
   */
  bool enable_icp;
  /**
   * ICP iteration cap.
   */
  uint32_t icp_max_iter;
  /**
   * ICP stops once the residual improves by less than this.
   */
  double icp_tol;
  /**
   * ICP correspondence distance cutoff, meters.
   */
  double icp_max_corr_dist;
  /**
   * Maximum ICP residual for acceptance, meters.
   */
  double icp_max_rms;
  /**
   * Keep every n-th point of the stored clouds (1 = keep all).
   */
  uint32_t icp_subsample_stride;
  /**
   * Distance under which a detection scores as a true loop, meters.
   */
  double loop_dist;
} IscConfig;

/**
 * One loop closure decision.
 */
typedef struct IscDetection {
  /**
   * Query frame id (insertion order, starting at 0).
   */
  uint64_t query;
  /**
   * Matched candidate frame id.
   */
  uint64_t candidate;
  /**
   * Descriptor column rotation selected by the alignment search.
   */
  uint32_t shift;
  /**
   * Initial yaw handed to registration, radians in [-pi, pi).
   */
  double yaw_init;
  /**
   * Whether the revisit runs opposite to the original travel direction.
   */
  bool reverse;
  /**
   * Whether the detection was accepted.
   */
  bool accepted;
  /**
   * Whether `temporal_score` holds a value.
   */
  bool has_temporal_score;
  /**
   * Mean combined similarity over the temporal window, in [0,2].
   */
  double temporal_score;
  /**
   * Whether `icp_rms` holds a value.
   */
  bool has_icp_rms;
  /**
   * Root-mean-square registration residual, meters.
   */
  double icp_rms;
  /**
   * Rejection reason, `ISC_REJECTION_NOT_REJECTED` when accepted.
   */
  enum IscRejection rejection;
} IscDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static C string.
 */
const char *isc_version(void);

/**
 * Static description of a status code.
 */
const char *isc_status_message(enum IscStatus status);

/**
 * Writes the default configuration.
 *
 * # Safety
 * `out` must point to a writable `IscConfig`.
 */
enum IscStatus isc_config_default(struct IscConfig *out);

/**
 * Creates an engine from an in-memory configuration.
 *
 * # Safety
 * `config` must point to a readable `IscConfig`, `out` to a writable
 * engine pointer.
 */
enum IscStatus isc_engine_new(const struct IscConfig *config, struct IscEngine **out);

/**
 * Creates an engine from a `key = value` configuration file. This is the
 * only constructor that can attach an intensity calibration curve.
 *
 * # Safety
 * `path` must be a valid nul-terminated string, `out` a writable engine
 * pointer.
 */
enum IscStatus isc_engine_new_from_file(const char *path, struct IscEngine **out);

/**
 * Creates an engine preloaded with a saved descriptor database. The
 * configured grid must match the stored one. Frame ids continue from the
 * stored count; stored frames are searchable but, having no point clouds,
 * any match against them skips registration.
 *
 * # Safety
 * `config` must point to a readable `IscConfig`, `db_path` to a valid
 * nul-terminated string, `out` to a writable engine pointer.
 */
enum IscStatus isc_engine_new_with_database(const struct IscConfig *config,
                                            const char *db_path,
                                            struct IscEngine **out);

/**
 * Destroys an engine. Null is a no-op.
 *
 * # Safety
 * `engine` must be a pointer from one of the constructors, not yet freed.
 */
void isc_engine_free(struct IscEngine *engine);

/**
 * Writes the engine's effective configuration (the calibration curve, if
 * any, is not representable here and is omitted).
 *
 * # Safety
 * `engine` must be a live engine pointer, `out` a writable `IscConfig`.
 */
enum IscStatus isc_engine_config(const struct IscEngine *engine, struct IscConfig *out);

/**
 * Frames stored in the database so far. Null reads as 0.
 *
 * # Safety
 * `engine` must be a live engine pointer or null.
 */
size_t isc_engine_size(const struct IscEngine *engine);

/**
 * Reverse matches still waiting for the frames after their query. A
 * detection buffer of `1 + isc_engine_pending()` records is always enough
 * for one call. Null reads as 0.
 *
 * # Safety
 * `engine` must be a live engine pointer or null.
 */
size_t isc_engine_pending(const struct IscEngine *engine);

/**
 * Feeds the next scan (interleaved `x y z intensity` quadruplets) and
 * collects the loop closure decisions it settles. The frame takes the
 * next id in insertion order.
 *
 * # Safety
 * `engine` must be a live engine pointer; `points` must reference
 * `4 * n_points` readable floats when `n_points` is nonzero;
 * `out_detections` must reference `capacity` writable records; and
 * `out_count` one writable count.
 */
enum IscStatus isc_engine_process_scan(struct IscEngine *engine,
                                       const float *points,
                                       size_t n_points,
                                       struct IscDetection *out_detections,
                                       size_t capacity,
                                       size_t *out_count);

/**
 * Flushes reverse matches that will never get their verification window,
 * rejecting them. Call once the sequence is exhausted.
 *
 * # Safety
 * `engine` must be a live engine pointer; `out_detections` must reference
 * `capacity` writable records; `out_count` one writable count.
 */
enum IscStatus isc_engine_finish(struct IscEngine *engine,
                                 struct IscDetection *out_detections,
                                 size_t capacity,
                                 size_t *out_count);

/**
 * Saves the descriptor database for a later
 * [`isc_engine_new_with_database`].
 *
 * # Safety
 * `engine` must be a live engine pointer, `path` a valid nul-terminated
 * string.
 */
enum IscStatus isc_engine_save_database(const struct IscEngine *engine, const char *path);

/**
 * Computes one scan's descriptor without touching any engine:
 * `n_rings * n_sectors` cells, row-major, each the maximum calibrated
 * intensity of its polar segment. `capacity` is in cells.
 *
 * # Safety
 * `config` must point to a readable `IscConfig`; `points` must reference
 * `4 * n_points` readable floats when `n_points` is nonzero; `out_cells`
 * must reference `capacity` writable floats.
 */
enum IscStatus isc_describe_scan(const struct IscConfig *config,
                                 const float *points,
                                 size_t n_points,
                                 float *out_cells,
                                 size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISC_H */
