//! Scoring, benchmarking, and export helpers for detection runs.
//!
//! A detection run is scored against a ground-truth trajectory: an accepted
//! detection whose query and candidate lie within `loop_dist` of each other
//! is a true positive, any other accepted detection is a false positive, and
//! a query frame that has at least one *true loop partner* — an earlier
//! frame within `loop_dist` whose index is more than `exclusion_window`
//! behind — but no accepted detection at all is a false negative. Scoring
//! never consults the detection order, so shuffled input produces the same
//! report.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{GridParams, Isc};
use crate::engine::Detection;
use crate::retrieval::{best_alignment, query_database, DescriptorDb, SearchParams};

/// One ground-truth trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPose {
    pub frame: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GtPose {
    fn dist(&self, other: &GtPose) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("detection references frame {frame} absent from the ground truth")]
    MissingFrame { frame: u64 },
}

/// Ground-truth positions, loadable from either trajectory format.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    poses: Vec<GtPose>,
    by_frame: HashMap<u64, usize>,
}

impl GroundTruth {
    pub fn new(poses: Vec<GtPose>) -> Self {
        let by_frame = poses
            .iter()
            .enumerate()
            .map(|(i, p)| (p.frame, i))
            .collect();
        Self { poses, by_frame }
    }

    /// Reads a trajectory file, auto-detected per line count:
    ///
    /// * 12 numbers — a flattened 3x4 pose matrix per line; the translation
    ///   is taken from columns 3/7/11 and the frame id is the line's rank.
    /// * 4 numbers — explicit `frame x y z` records.
    ///
    /// `#` comments and blank lines are ignored in both formats.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parse_err = |line: usize, reason: String| EvalError::Parse {
            path: path.display().to_string(),
            line,
            reason,
        };
        let mut poses = Vec::new();
        let mut rank = 0u64;
        let mut format: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let mut fields = [0.0f64; 12];
            let mut n = 0usize;
            for tok in stripped.split_whitespace() {
                if n == 12 {
                    n += 1;
                    break;
                }
                fields[n] = tok
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad number `{tok}`")))?;
                n += 1;
            }
            if !matches!(n, 4 | 12) {
                return Err(parse_err(
                    line,
                    format!("expected 4 or 12 numbers per record, got {n}"),
                ));
            }
            match format {
                None => format = Some(n),
                Some(f) if f != n => {
                    return Err(parse_err(
                        line,
                        format!("record has {n} numbers in a {f}-number file"),
                    ))
                }
                Some(_) => {}
            }
            let pose = if n == 12 {
                GtPose {
                    frame: rank,
                    x: fields[3],
                    y: fields[7],
                    z: fields[11],
                }
            } else {
                let frame = fields[0];
                if frame < 0.0 || !frame.is_finite() || frame.fract() != 0.0 {
                    return Err(parse_err(line, format!("bad frame id `{frame}`")));
                }
                GtPose {
                    frame: frame as u64,
                    x: fields[1],
                    y: fields[2],
                    z: fields[3],
                }
            };
            poses.push(pose);
            rank += 1;
        }
        Ok(Self::new(poses))
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[GtPose] {
        &self.poses
    }

    pub fn pose(&self, frame: u64) -> Option<&GtPose> {
        self.by_frame.get(&frame).map(|&i| &self.poses[i])
    }
}

/// Scoring parameters; `loop_dist` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub loop_dist: f64,
    /// Frames closer than this in index never form a true pair, matching
    /// the search exclusion applied during the run.
    pub exclusion_window: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            loop_dist: 4.0,
            exclusion_window: 50,
        }
    }
}

/// Per-query latency summary, microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

impl LatencyStats {
    /// Summarizes raw per-query timings, in microseconds. Panics on an
    /// empty sample set.
    pub fn from_samples_us(samples: Vec<f64>) -> Self {
        summarize_us(samples)
    }
}

/// Outcome of scoring one detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Filled by live runs; absent when rescoring a stored log.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_stats: Option<LatencyStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub db_size_final: Option<usize>,
}

/// Scores a detection log against ground truth; see the module docs for the
/// exact positive/negative definitions.
pub fn evaluate(
    detections: &[Detection],
    gt: &GroundTruth,
    params: &EvalParams,
) -> Result<Report, EvalError> {
    let pose_of = |frame: u64| gt.pose(frame).ok_or(EvalError::MissingFrame { frame });
    let mut true_positives = 0usize;
    let mut false_positives = 0usize;
    let mut answered: HashSet<u64> = HashSet::new();
    for d in detections {
        let q = pose_of(d.query)?;
        if !d.accepted {
            continue;
        }
        let c = pose_of(d.candidate)?;
        if q.dist(c) <= params.loop_dist {
            true_positives += 1;
        } else {
            false_positives += 1;
        }
        answered.insert(d.query);
    }

    let mut false_negatives = 0usize;
    for (i, q) in gt.poses().iter().enumerate() {
        if answered.contains(&q.frame) {
            continue;
        }
        let has_partner = gt.poses()[..i].iter().any(|p| {
            q.frame.abs_diff(p.frame) > params.exclusion_window as u64
                && q.dist(p) <= params.loop_dist
        });
        if has_partner {
            false_negatives += 1;
        }
    }

    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Report {
        precision: ratio(true_positives, true_positives + false_positives),
        recall: ratio(true_positives, true_positives + false_negatives),
        true_positives,
        false_positives,
        false_negatives,
        latency_stats: None,
        db_size_final: None,
    })
}

/// Writes the trajectory with per-frame loop flags as CSV
/// (`frame_id,x,y,z,is_loop`); a frame is flagged when it is the query of an
/// accepted detection.
pub fn export_trajectory_overlay(
    w: &mut impl io::Write,
    gt: &GroundTruth,
    detections: &[Detection],
) -> io::Result<()> {
    let looped: HashSet<u64> = detections
        .iter()
        .filter(|d| d.accepted)
        .map(|d| d.query)
        .collect();
    let mut out = String::from("frame_id,x,y,z,is_loop\n");
    for p in gt.poses() {
        let flag = u8::from(looped.contains(&p.frame));
        writeln!(out, "{},{},{},{},{}", p.frame, p.x, p.y, p.z, flag)
            .expect("string write cannot fail");
    }
    w.write_all(out.as_bytes())
}

/// Reads a detection log: one JSON record per line, as written during a run.
pub fn read_detection_log(path: impl AsRef<Path>) -> Result<Vec<Detection>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut detections = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        detections.push(
            serde_json::from_str(line).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(detections)
}

/// Timing summary from [`bench_query`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchStats {
    pub db_size: usize,
    pub trials: usize,
    /// Both retrieval stages per query.
    pub full: LatencyStats,
    /// Rotation-search stage alone per query.
    pub binary: LatencyStats,
}

fn summarize_us(mut samples: Vec<f64>) -> LatencyStats {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let mean_us = samples.iter().sum::<f64>() / samples.len() as f64;
    // Nearest-rank quantile: the smallest sample with at least a q-fraction
    // of the data at or below it.
    let pick = |q: f64| {
        let rank = (q * samples.len() as f64).ceil() as usize;
        samples[rank.clamp(1, samples.len()) - 1]
    };
    LatencyStats {
        mean_us,
        p50_us: pick(0.50),
        p99_us: pick(0.99),
    }
}

/// Synthesizes a descriptor with block-structured occupancy, roughly
/// matching what real scans produce (about a third of cells filled, in
/// contiguous runs).
fn realistic_descriptor(params: &GridParams, rng: &mut ChaCha12Rng) -> Isc {
    let mut cells = vec![0.0f32; params.n_rings * params.n_sectors];
    for sector in 0..params.n_sectors {
        let mut ring = 0usize;
        while ring < params.n_rings {
            let run = rng.random_range(1..8usize);
            if rng.random_bool(0.35) {
                let v = rng.random_range(0.05..1.0f32);
                for r in ring..(ring + run).min(params.n_rings) {
                    // Vary within the run so intensity columns are not flat.
                    cells[r * params.n_sectors + sector] =
                        (v * rng.random_range(0.8..1.2)).clamp(0.02, 1.0);
                }
            }
            ring += run;
        }
    }
    Isc::from_cells(params.n_rings, params.n_sectors, cells)
}

/// Times retrieval against a synthetic database: `trials` fresh queries are
/// searched over `db_size` generated descriptors, reporting the full
/// two-stage latency and the rotation-search stage alone.
pub fn bench_query(db_size: usize, trials: usize, seed: u64) -> BenchStats {
    assert!(db_size > 0 && trials > 0, "bench needs work to measure");
    let params = GridParams::default();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut db = DescriptorDb::new(params);
    for frame in 0..db_size as u64 {
        db.push(frame, realistic_descriptor(&params, &mut rng))
            .expect("generated descriptor matches its own grid");
    }
    let queries: Vec<Isc> = (0..trials)
        .map(|_| realistic_descriptor(&params, &mut rng))
        .collect();
    let search = SearchParams::default();

    let mut full = Vec::with_capacity(trials);
    let mut binary = Vec::with_capacity(trials);
    for query in &queries {
        let start = Instant::now();
        let hit = query_database(db.entries(), query, &search);
        full.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(hit);

        let mask = crate::retrieval::PackedMask::from_isc(query).doubled();
        let start = Instant::now();
        let mut acc = 0u64;
        for entry in db.entries() {
            let alignment = best_alignment(&mask, &entry.mask);
            acc = acc.wrapping_add(alignment.hamming as u64);
        }
        binary.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(acc);
    }
    BenchStats {
        db_size,
        trials,
        full: summarize_us(full),
        binary: summarize_us(binary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_gt(n: usize, spacing: f64) -> GroundTruth {
        GroundTruth::new(
            (0..n)
                .map(|i| GtPose {
                    frame: i as u64,
                    x: i as f64 * spacing,
                    y: 0.0,
                    z: 0.0,
                })
                .collect(),
        )
    }

    fn det(query: u64, candidate: u64, accepted: bool) -> Detection {
        Detection {
            query,
            candidate,
            shift: 0,
            yaw_init: 0.0,
            reverse: false,
            temporal_score: accepted.then_some(1.9),
            icp_rms: None,
            accepted,
            reason: (!accepted).then(|| "temporal".to_owned()),
        }
    }

    #[test]
    fn kitti_pose_lines_take_translation_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        fs::write(
            &path,
            "1 0 0 10 0 1 0 20 0 0 1 30\n\
             1 0 0 11 0 1 0 21 0 0 1 31\n",
        )
        .unwrap();
        let gt = GroundTruth::from_file(&path).unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(
            gt.pose(0),
            Some(&GtPose { frame: 0, x: 10.0, y: 20.0, z: 30.0 })
        );
        assert_eq!(
            gt.pose(1),
            Some(&GtPose { frame: 1, x: 11.0, y: 21.0, z: 31.0 })
        );
    }

    #[test]
    fn frame_xyz_lines_keep_explicit_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.txt");
        fs::write(&path, "# comment\n\n7 1.5 -2 0.25\n9 3 4 5\n").unwrap();
        let gt = GroundTruth::from_file(&path).unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(
            gt.pose(7),
            Some(&GtPose { frame: 7, x: 1.5, y: -2.0, z: 0.25 })
        );
        assert_eq!(gt.pose(8), None);
    }

    #[test]
    fn malformed_trajectories_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        for (content, needle) in [
            ("1 2 3 4 5\n", "expected 4 or 12"),
            ("7 1 2 three\n", "bad number"),
            ("7.5 1 2 3\n", "bad frame id"),
            ("-1 1 2 3\n", "bad frame id"),
        ] {
            let path = dir.path().join("bad.txt");
            fs::write(&path, content).unwrap();
            let err = GroundTruth::from_file(&path).unwrap_err();
            assert!(matches!(err, EvalError::Parse { line: 1, .. }), "{err:?}");
            assert!(err.to_string().contains(needle), "{err} !~ {needle}");
        }
        // Formats cannot switch mid-file.
        let path = dir.path().join("mixed.txt");
        fs::write(&path, "1 0 0 10 0 1 0 20 0 0 1 30\n7 1 2 3\n").unwrap();
        let err = GroundTruth::from_file(&path).unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 2, .. }), "{err:?}");
        assert!(err.to_string().contains("12-number file"), "{err}");
    }

    #[test]
    fn counts_follow_the_distance_and_window_rules() {
        // 100 frames, 1 m apart. Frame 90 is ~90 m from frame 0 (far), but
        // frames 60/61 sit within loop_dist of frame 62? No: spacing 1 m,
        // loop_dist 2.5 -> partners must also clear the 50-frame window.
        let gt = line_gt(100, 1.0);
        let params = EvalParams { loop_dist: 2.5, exclusion_window: 50 };
        // No frame has a partner >50 indices back within 2.5 m, so an empty
        // log scores perfectly.
        let clean = evaluate(&[], &gt, &params).unwrap();
        assert_eq!(clean.precision, 1.0);
        assert_eq!(clean.recall, 1.0);
        assert_eq!(
            (clean.true_positives, clean.false_positives, clean.false_negatives),
            (0, 0, 0)
        );
    }

    #[test]
    fn revisit_scenario_scores_each_class_once() {
        // A loop trajectory: frames 60..=62 sit exactly on frames 0..=2.
        let mut poses: Vec<GtPose> = (0..60)
            .map(|i| GtPose { frame: i, x: i as f64 * 2.0, y: 0.0, z: 0.0 })
            .collect();
        for i in 60..63u64 {
            poses.push(GtPose { frame: i, x: (i - 60) as f64 * 2.0, y: 0.0, z: 0.0 });
        }
        let gt = GroundTruth::new(poses);
        let params = EvalParams { loop_dist: 3.0, exclusion_window: 50 };
        let detections = vec![
            det(60, 0, true),  // true positive: same spot
            det(61, 40, true), // false positive: 79 m apart
            det(62, 1, false), // rejected: frame 62 becomes a false negative
        ];
        let report = evaluate(&detections, &gt, &params).unwrap();
        assert_eq!(report.true_positives, 1);
        assert_eq!(report.false_positives, 1);
        assert_eq!(report.false_negatives, 1);
        assert_eq!(report.precision, 0.5);
        assert_eq!(report.recall, 0.5);
        // Order independence.
        let mut shuffled = detections.clone();
        shuffled.reverse();
        assert_eq!(evaluate(&shuffled, &gt, &params).unwrap(), report);
    }

    #[test]
    fn unknown_frames_error_rather_than_skew_counts() {
        let gt = line_gt(10, 1.0);
        let err = evaluate(&[det(99, 0, true)], &gt, &EvalParams::default()).unwrap_err();
        assert!(matches!(err, EvalError::MissingFrame { frame: 99 }));
    }

    #[test]
    fn overlay_marks_accepted_queries_only() {
        let gt = line_gt(3, 1.0);
        let detections = vec![det(1, 0, true), det(2, 0, false)];
        let mut out = Vec::new();
        export_trajectory_overlay(&mut out, &gt, &detections).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "frame_id,x,y,z,is_loop\n0,0,0,0,0\n1,1,0,0,1\n2,2,0,0,0\n"
        );
    }

    #[test]
    fn detection_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.jsonl");
        let detections = vec![det(60, 0, true), det(61, 1, false)];
        let text: String = detections
            .iter()
            .map(|d| serde_json::to_string(d).unwrap() + "\n")
            .collect();
        fs::write(&path, text).unwrap();
        assert_eq!(read_detection_log(&path).unwrap(), detections);

        fs::write(&path, "{not json}\n").unwrap();
        let err = read_detection_log(&path).unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 1, .. }));
    }

    #[test]
    fn bench_reports_ordered_quantiles() {
        let stats = bench_query(64, 8, 5);
        assert_eq!(stats.db_size, 64);
        assert_eq!(stats.trials, 8);
        for s in [stats.full, stats.binary] {
            assert!(s.mean_us > 0.0);
            assert!(s.p50_us <= s.p99_us);
        }
        // The binary stage is a strict subset of the full query work.
        assert!(stats.binary.p50_us <= stats.full.p50_us * 1.5);
    }

    #[test]
    fn summary_quantiles_pick_known_positions() {
        let stats = summarize_us((1..=100).map(f64::from).collect());
        assert_eq!(stats.p50_us, 50.0);
        assert_eq!(stats.p99_us, 99.0);
        assert_eq!(stats.mean_us, 50.5);
    }
}
