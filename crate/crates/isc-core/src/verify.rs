//! Candidate verification: temporal consistency and ICP refinement.
//!
//! Retrieval alone occasionally pairs two genuinely similar but distinct
//! places. Two independent checks weed those out. The temporal check replays
//! the match over the preceding frames of both trajectories (the following
//! frames of the query for a reverse revisit) and demands that the combined
//! geometry-plus-intensity agreement stays high across the whole window. The
//! geometric check runs point-to-point ICP between the two clouds, seeded
//! with the yaw recovered from the descriptor rotation, and accepts only if
//! the aligned residual is small.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::ingest::PointCloud;
use crate::retrieval::{match_pair, DbEntry};

/// Yaw (radians, in `[-pi, pi)`) that maps query points into the candidate
/// frame, given the column rotation the alignment search selected.
pub fn yaw_from_shift(shift: usize, n_sectors: usize) -> f64 {
    let mut yaw = TAU * shift as f64 / n_sectors as f64;
    if yaw >= PI {
        yaw -= TAU;
    }
    yaw
}

/// A relative heading beyond a quarter turn means the place is being
/// revisited in the opposite travel direction.
pub fn is_reverse(yaw: f64) -> bool {
    yaw.abs() > PI / 2.0
}

/// Temporal consistency window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalParams {
    /// Neighbor pairs to examine on each side of the match.
    pub n_temporal: usize,
    /// Minimum mean pair score (geometry + intensity, so in `[0,2]`) to
    /// accept.
    pub xi: f64,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self { n_temporal: 5, xi: 1.8 }
    }
}

/// Mean combined agreement of the `n_temporal` neighbor pairs around a
/// match of `query` against `candidate`.
///
/// Pair `k` compares frame `query - k` (or `query + k` when the revisit is
/// reversed) against frame `candidate - k`, each at its own best rotation,
/// and contributes the sum of its geometry and intensity scores. Returns
/// `None` when either side lacks the frames to fill the window.
pub fn temporal_consistency(
    entries: &[DbEntry],
    query: usize,
    candidate: usize,
    reverse: bool,
    params: &TemporalParams,
) -> Option<f64> {
    let n = params.n_temporal;
    if candidate < n || query >= entries.len() {
        return None;
    }
    if reverse {
        if query + n >= entries.len() {
            return None;
        }
    } else if query < n {
        return None;
    }
    let mut sum = 0.0f64;
    for k in 1..=n {
        let q = if reverse { query + k } else { query - k };
        let c = candidate - k;
        let qe = &entries[q];
        let ce = &entries[c];
        let score = match_pair(&qe.isc, &qe.mask, &ce.isc, &ce.mask);
        sum += score.geometry + score.intensity;
    }
    Some(sum / n as f64)
}

/// Point-to-point ICP settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Stop once the residual improves by less than this between iterations.
    pub tol: f64,
    /// Correspondences farther apart than this are discarded; also the
    /// nearest-neighbor grid cell size.
    pub max_corr_dist: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iter: 30, tol: 1e-4, max_corr_dist: 2.0 }
    }
}

/// Outcome of an ICP run. The transform maps query points into the candidate
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Root-mean-square correspondence residual after the final update;
    /// infinite when no usable correspondence set was found.
    pub rms: f64,
    pub iterations: usize,
    /// Correspondences used in the last solve.
    pub matched: usize,
    pub converged: bool,
}

impl IcpResult {
    /// Heading component of the recovered rotation.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

/// Uniform hash grid over the target cloud; cells are sized to the
/// correspondence cutoff so the 27-cell neighborhood of a query point covers
/// every admissible match.
struct VoxelGrid {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vector3<f64>>,
}

impl VoxelGrid {
    fn build(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, buckets, points }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Nearest stored point within one cell size of `p`, if any.
    fn nearest_within(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        let (kx, ky, kz) = Self::key(p, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i as usize] - p).norm_squared();
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((i as usize, d2));
                        }
                    }
                }
            }
        }
        best.and_then(|(i, d2)| {
            let d = d2.sqrt();
            (d <= self.cell).then_some((i, d))
        })
    }
}

/// Closed-form least-squares rigid transform taking `sources` onto
/// `targets` (paired by index).
fn solve_rigid(sources: &[Vector3<f64>], targets: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = sources.len() as f64;
    let centroid_s: Vector3<f64> = sources.iter().sum::<Vector3<f64>>() / n;
    let centroid_t: Vector3<f64> = targets.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in sources.iter().zip(targets) {
        h += (s - centroid_s) * (t - centroid_t).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        // Reflection case: flip the least-significant singular direction.
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        rotation = v * d * u.transpose();
    }
    let translation = centroid_t - rotation * centroid_s;
    (rotation, translation)
}

/// Point-to-point ICP from `query` onto `candidate`, seeded with a pure yaw
/// rotation.
///
/// Each iteration pairs every transformed query point with its nearest
/// candidate point within the correspondence cutoff, re-solves the rigid
/// transform on those pairs in closed form, and measures the residual. Fewer
/// than three correspondences aborts the run with an infinite residual.
pub fn icp_point_to_point(
    query: &PointCloud,
    candidate: &PointCloud,
    yaw_init: f64,
    params: &IcpParams,
) -> IcpResult {
    let sources: Vec<Vector3<f64>> =
        query.points.iter().map(|p| Vector3::new(p.x, p.y, p.z)).collect();
    let targets: Vec<Vector3<f64>> =
        candidate.points.iter().map(|p| Vector3::new(p.x, p.y, p.z)).collect();
    let grid = VoxelGrid::build(targets, params.max_corr_dist);

    let mut rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_init).into_inner();
    let mut translation = Vector3::zeros();
    let mut rms = f64::INFINITY;
    let mut converged = false;
    let mut matched = 0usize;
    let mut iterations = 0usize;

    for it in 1..=params.max_iter {
        iterations = it;
        let mut paired_sources = Vec::new();
        let mut paired_targets = Vec::new();
        for s in &sources {
            let moved = rotation * s + translation;
            if let Some((j, _)) = grid.nearest_within(&moved) {
                paired_sources.push(*s);
                paired_targets.push(grid.points[j]);
            }
        }
        matched = paired_sources.len();
        if matched < 3 {
            return IcpResult {
                rotation,
                translation,
                rms: f64::INFINITY,
                iterations,
                matched,
                converged: false,
            };
        }
        let (r, t) = solve_rigid(&paired_sources, &paired_targets);
        rotation = r;
        translation = t;
        let sum_sq: f64 = paired_sources
            .iter()
            .zip(&paired_targets)
            .map(|(s, c)| (rotation * s + translation - c).norm_squared())
            .sum();
        let new_rms = (sum_sq / matched as f64).sqrt();
        if (rms - new_rms).abs() < params.tol {
            rms = new_rms;
            converged = true;
            break;
        }
        rms = new_rms;
    }

    IcpResult { rotation, translation, rms, iterations, matched, converged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Isc;
    use crate::ingest::Point;
    use crate::retrieval::PackedMask;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn entry_from_cells(frame: u64, cells: Vec<f32>) -> DbEntry {
        let isc = Isc::from_cells(6, 8, cells);
        let mask = PackedMask::from_isc(&isc);
        DbEntry { frame, isc, mask }
    }

    fn cloud_of(pts: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud {
            points: pts
                .iter()
                .map(|&(x, y, z)| Point { x, y, z, intensity: 0.5 })
                .collect(),
        }
    }

    /// Scattered cloud with ~1 m point spacing so nearest-neighbor pairing
    /// is unambiguous under small offsets.
    fn scattered_cloud(n: usize) -> PointCloud {
        let points = (0..n)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9e3779b97f4a7c15);
                Point {
                    x: (i % 17) as f64 * 1.3 + (h % 7) as f64 * 0.05,
                    y: (i / 17) as f64 * 1.1 + (h % 5) as f64 * 0.07,
                    z: (h % 11) as f64 * 0.21,
                    intensity: 0.5,
                }
            })
            .collect();
        PointCloud { points }
    }

    fn transformed(cloud: &PointCloud, yaw: f64, t: Vector3<f64>) -> PointCloud {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| {
                    let v = r * Vector3::new(p.x, p.y, p.z) + t;
                    Point { x: v.x, y: v.y, z: v.z, intensity: p.intensity }
                })
                .collect(),
        }
    }

    #[test]
    fn yaw_covers_quadrants_and_wraps() {
        assert_eq!(yaw_from_shift(0, 20), 0.0);
        assert_eq!(yaw_from_shift(5, 20), FRAC_PI_2);
        assert_eq!(yaw_from_shift(10, 20), -PI);
        assert_eq!(yaw_from_shift(15, 20), -FRAC_PI_2);
        assert!((yaw_from_shift(19, 20) + TAU / 20.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_needs_more_than_a_quarter_turn() {
        assert!(!is_reverse(yaw_from_shift(5, 20)));
        assert!(is_reverse(yaw_from_shift(6, 20)));
        assert!(is_reverse(yaw_from_shift(10, 20)));
        assert!(is_reverse(yaw_from_shift(14, 20)));
        assert!(!is_reverse(yaw_from_shift(15, 20)));
        assert!(!is_reverse(0.0));
    }

    fn distinct_cells(tag: u64) -> Vec<f32> {
        (0..6 * 8)
            .map(|i| {
                let h = (i as u64 + 1).wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(tag * 7919);
                if h.is_multiple_of(5) {
                    0.0
                } else {
                    (h % 41) as f32 / 41.0
                }
            })
            .collect()
    }

    #[test]
    fn self_sequence_scores_exactly_two() {
        // Frames 0..=9 and 10..=19 are copies of each other, so a match of
        // 15 against 5 replays perfectly.
        let entries: Vec<DbEntry> = (0..20u64)
            .map(|f| entry_from_cells(f, distinct_cells(f % 10)))
            .collect();
        let score = temporal_consistency(&entries, 15, 5, false, &TemporalParams::default());
        assert_eq!(score, Some(2.0));
    }

    #[test]
    fn window_shortfall_returns_none() {
        let entries: Vec<DbEntry> =
            (0..20u64).map(|f| entry_from_cells(f, distinct_cells(f))).collect();
        let params = TemporalParams::default();
        // Candidate too early to have a window behind it.
        assert_eq!(temporal_consistency(&entries, 15, 3, false, &params), None);
        // Forward query too early.
        assert_eq!(temporal_consistency(&entries, 4, 10, false, &params), None);
        // Reverse query too close to the end of the sequence.
        assert_eq!(temporal_consistency(&entries, 16, 10, true, &params), None);
        assert!(temporal_consistency(&entries, 14, 10, true, &params).is_some());
    }

    #[test]
    fn reverse_window_reads_later_query_frames() {
        // Frames are unique except that query frames 11..=15 mirror
        // candidate frames 4..=0: a reverse match of 10 against 5 replays
        // perfectly, while a forward match of the same pair does not.
        let mut entries: Vec<DbEntry> =
            (0..16u64).map(|f| entry_from_cells(f, distinct_cells(f))).collect();
        for k in 1..=5u64 {
            entries[(10 + k) as usize] = entry_from_cells(10 + k, distinct_cells(5 - k));
        }
        let params = TemporalParams::default();
        let rev = temporal_consistency(&entries, 10, 5, true, &params).unwrap();
        assert_eq!(rev, 2.0);
        let fwd = temporal_consistency(&entries, 10, 5, false, &params).unwrap();
        assert!(fwd < 2.0);
    }

    #[test]
    fn icp_identity_converges_immediately() {
        let cloud = scattered_cloud(120);
        let result = icp_point_to_point(&cloud, &cloud, 0.0, &IcpParams::default());
        assert!(result.converged);
        assert!(result.rms < 1e-9);
        assert_eq!(result.matched, 120);
        assert!((result.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(result.translation.norm() < 1e-9);
    }

    #[test]
    fn icp_recovers_seeded_yaw_and_translation() {
        let query = scattered_cloud(150);
        let t_true = Vector3::new(0.4, -0.3, 0.2);
        let candidate = transformed(&query, 0.3, t_true);
        let result = icp_point_to_point(&query, &candidate, 0.3, &IcpParams::default());
        assert!(result.converged);
        assert!(result.rms < 1e-6, "rms {}", result.rms);
        assert!((result.yaw() - 0.3).abs() < 1e-6);
        assert!((result.translation - t_true).norm() < 1e-6);
    }

    #[test]
    fn icp_without_seed_fails_on_large_rotation() {
        // A half-turn apart with an identity seed leaves the correspondence
        // sets inconsistent; the run must not report a clean alignment.
        let query = scattered_cloud(150);
        let candidate = transformed(&query, PI, Vector3::zeros());
        let seeded = icp_point_to_point(&query, &candidate, PI, &IcpParams::default());
        assert!(seeded.converged && seeded.rms < 1e-6);
        let unseeded = icp_point_to_point(&query, &candidate, 0.0, &IcpParams::default());
        assert!(!unseeded.converged || unseeded.rms > 0.1);
    }

    #[test]
    fn icp_fails_cleanly_when_clouds_do_not_overlap() {
        let query = scattered_cloud(50);
        let candidate = transformed(&query, 0.0, Vector3::new(500.0, 0.0, 0.0));
        let result = icp_point_to_point(&query, &candidate, 0.0, &IcpParams::default());
        assert!(!result.converged);
        assert!(result.rms.is_infinite());
        assert!(result.matched < 3);
    }

    #[test]
    fn icp_on_empty_cloud_fails_cleanly() {
        let empty = cloud_of(&[]);
        let full = scattered_cloud(20);
        let result = icp_point_to_point(&empty, &full, 0.0, &IcpParams::default());
        assert!(!result.converged);
        assert!(result.rms.is_infinite());
    }

    proptest! {
        #[test]
        fn grid_nearest_matches_brute_force(
            pts in proptest::collection::vec(
                (-10.0f64..10.0, -10.0f64..10.0, -2.0f64..2.0),
                1..60,
            ),
            probe in (-12.0f64..12.0, -12.0f64..12.0, -3.0f64..3.0),
        ) {
            let cell = 2.0;
            let points: Vec<Vector3<f64>> =
                pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            let grid = VoxelGrid::build(points.clone(), cell);
            let p = Vector3::new(probe.0, probe.1, probe.2);
            let brute = points
                .iter()
                .enumerate()
                .map(|(i, q)| (i, (q - p).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            match grid.nearest_within(&p) {
                Some((i, d)) => {
                    prop_assert!(d <= cell);
                    prop_assert_eq!(i, brute.0);
                    prop_assert!((d - brute.1).abs() < 1e-12);
                }
                None => prop_assert!(brute.1 > cell),
            }
        }

        #[test]
        fn icp_aligns_any_yaw_when_seeded_with_it(
            yaw in -PI..PI,
            tx in -0.3f64..0.3,
            ty in -0.3f64..0.3,
        ) {
            let query = scattered_cloud(100);
            let t = Vector3::new(tx, ty, 0.1);
            let candidate = transformed(&query, yaw, t);
            let result = icp_point_to_point(&query, &candidate, yaw, &IcpParams::default());
            prop_assert!(result.converged);
            prop_assert!(result.rms < 1e-5, "rms {}", result.rms);
            let wrapped = (result.yaw() - yaw + PI).rem_euclid(TAU) - PI;
            prop_assert!(wrapped.abs() < 1e-5);
            prop_assert!((result.translation - t).norm() < 1e-5);
        }
    }
}
