//! Two-stage place retrieval over descriptor databases.
//!
//! Stage one reduces each descriptor to a binary occupancy mask (one bit per
//! cell, packed per sector column into `u64` words) and scores geometric
//! agreement as the fraction of cells on which two masks agree, maximized
//! over all column rotations of the query. The rotation search is a pure
//! XOR/popcount scan, cheap enough to run against every stored frame. Stage
//! two re-scores only the survivors with the full intensity matrix: the mean
//! column-wise cosine similarity at the rotation stage one found. A frame is
//! retrieved when it passes both thresholds; among passers the one with the
//! highest intensity score wins.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::LazyLock;

use thiserror::Error;

use crate::descriptor::{GridParams, Isc};

/// Binary occupancy mask of a descriptor, packed per sector column.
///
/// Column `j` occupies words `[j*words_per_col, (j+1)*words_per_col)`; ring
/// `r` of that column is bit `r % 64` of word `r / 64`. Padding bits beyond
/// `n_rings` stay zero, so XOR-based cell counts never see them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMask {
    pub n_rings: usize,
    pub n_sectors: usize,
    pub words_per_col: usize,
    words: Vec<u64>,
}

impl PackedMask {
    /// Packs the non-empty cells (`cell > 0`) of a descriptor.
    pub fn from_isc(isc: &Isc) -> Self {
        let words_per_col = isc.n_rings.div_ceil(64);
        let mut words = vec![0u64; isc.n_sectors * words_per_col];
        for j in 0..isc.n_sectors {
            for r in 0..isc.n_rings {
                if isc.cell(r, j) > 0.0 {
                    words[j * words_per_col + r / 64] |= 1 << (r % 64);
                }
            }
        }
        Self { n_rings: isc.n_rings, n_sectors: isc.n_sectors, words_per_col, words }
    }

    #[inline]
    pub fn filled(&self, ring: usize, sector: usize) -> bool {
        let word = self.words[sector * self.words_per_col + ring / 64];
        word >> (ring % 64) & 1 == 1
    }

    /// Number of non-empty cells.
    pub fn ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// The packed words, column-major: `words_per_col` words per sector
    /// column, ring `r` at bit `r % 64` of word `r / 64`, padding bits zero.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Two consecutive copies of the column words, so that every rotation of
    /// the query is a contiguous slice. Built once per query.
    pub fn doubled(&self) -> DoubledMask {
        let mut words = Vec::with_capacity(2 * self.words.len());
        words.extend_from_slice(&self.words);
        words.extend_from_slice(&self.words);
        DoubledMask {
            n_rings: self.n_rings,
            n_sectors: self.n_sectors,
            words_per_col: self.words_per_col,
            words,
        }
    }
}

/// A query mask with its columns laid out twice back to back; see
/// [`PackedMask::doubled`].
#[derive(Debug, Clone)]
pub struct DoubledMask {
    pub n_rings: usize,
    pub n_sectors: usize,
    pub words_per_col: usize,
    words: Vec<u64>,
}

/// Result of the rotation search between two masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Column rotation to apply to the query for the best agreement.
    pub shift: usize,
    /// Cells on which the rotated query and the candidate disagree.
    pub hamming: u32,
    /// Agreement fraction: `1 - hamming / (n_rings * n_sectors)`.
    pub geometry: f64,
}

#[inline(always)]
fn shift_scan(qq: &[u64], cand: &[u64], n_sectors: usize, words_per_col: usize) -> (usize, u32) {
    let cols = n_sectors * words_per_col;
    let mut best_shift = 0usize;
    let mut best = u32::MAX;
    for k in 0..n_sectors {
        // Rotating the query by k aligns query column j with candidate
        // column (j + k) mod n; on the doubled buffer that is the slice
        // starting (n - k) columns in.
        let off = (n_sectors - k) * words_per_col;
        let window = &qq[off..off + cols];
        // Four-wide blocks so the popcounts vectorize on targets with wide
        // registers; the scalar tail covers the last cols % 4 words.
        let mut q_blocks = window.chunks_exact(4);
        let mut c_blocks = cand.chunks_exact(4);
        let mut ham = 0u32;
        for (q, c) in (&mut q_blocks).zip(&mut c_blocks) {
            ham += (q[0] ^ c[0]).count_ones()
                + (q[1] ^ c[1]).count_ones()
                + (q[2] ^ c[2]).count_ones()
                + (q[3] ^ c[3]).count_ones();
        }
        for (a, b) in q_blocks.remainder().iter().zip(c_blocks.remainder()) {
            ham += (a ^ b).count_ones();
        }
        if ham < best {
            best = ham;
            best_shift = k;
        }
    }
    (best_shift, best)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn shift_scan_popcnt(qq: &[u64], cand: &[u64], n: usize, wpc: usize) -> (usize, u32) {
    shift_scan(qq, cand, n, wpc)
}

/// `shift_scan` with the per-window popcount done four words at a time:
/// XOR, nibble-table lookups for per-byte counts, and a sum-of-absolute-
/// differences against zero to fold the bytes into lane totals.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,popcnt")]
unsafe fn shift_scan_avx2(qq: &[u64], cand: &[u64], n_sectors: usize, wpc: usize) -> (usize, u32) {
    use std::arch::x86_64::*;

    let cols = n_sectors * wpc;
    let blocks = cols / 4;
    #[rustfmt::skip]
    let nibble_counts = _mm256_setr_epi8(
        0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4,
        0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4,
    );
    let low_nibbles = _mm256_set1_epi8(0x0f);
    let zero = _mm256_setzero_si256();

    let mut best_shift = 0usize;
    let mut best = u32::MAX;
    for k in 0..n_sectors {
        let off = (n_sectors - k) * wpc;
        let window = &qq[off..off + cols];
        let mut acc = zero;
        for i in 0..blocks {
            let q = _mm256_loadu_si256(window.as_ptr().add(4 * i).cast());
            let c = _mm256_loadu_si256(cand.as_ptr().add(4 * i).cast());
            let x = _mm256_xor_si256(q, c);
            let lo = _mm256_and_si256(x, low_nibbles);
            let hi = _mm256_and_si256(_mm256_srli_epi16(x, 4), low_nibbles);
            let counts = _mm256_add_epi8(
                _mm256_shuffle_epi8(nibble_counts, lo),
                _mm256_shuffle_epi8(nibble_counts, hi),
            );
            acc = _mm256_add_epi64(acc, _mm256_sad_epu8(counts, zero));
        }
        let mut lanes = [0u64; 4];
        _mm256_storeu_si256(lanes.as_mut_ptr().cast(), acc);
        let mut ham = (lanes[0] + lanes[1] + lanes[2] + lanes[3]) as u32;
        for i in blocks * 4..cols {
            ham += (window[i] ^ cand[i]).count_ones();
        }
        if ham < best {
            best = ham;
            best_shift = k;
        }
    }
    (best_shift, best)
}

/// `shift_scan` with hardware per-lane popcounts: the window is consumed
/// eight words at a time (a masked load covers the tail), so each shift is
/// a handful of wide XOR/popcount/add operations plus one reduction.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vpopcntdq,popcnt")]
unsafe fn shift_scan_avx512(qq: &[u64], cand: &[u64], n_sectors: usize, wpc: usize) -> (usize, u32) {
    use std::arch::x86_64::*;

    let cols = n_sectors * wpc;
    let full = cols / 8;
    let tail = (1u16 << (cols % 8)).wrapping_sub(1) as __mmask8;
    let mut best_shift = 0usize;
    let mut best = u32::MAX;
    for k in 0..n_sectors {
        let off = (n_sectors - k) * wpc;
        let window = qq.as_ptr().add(off);
        let mut acc = _mm512_setzero_si512();
        for b in 0..full {
            let q = _mm512_loadu_si512(window.add(8 * b).cast());
            let c = _mm512_loadu_si512(cand.as_ptr().add(8 * b).cast());
            acc = _mm512_add_epi64(acc, _mm512_popcnt_epi64(_mm512_xor_si512(q, c)));
        }
        if tail != 0 {
            // The masked lanes are never touched, so reading at the slice
            // end stays in bounds.
            let q = _mm512_maskz_loadu_epi64(tail, window.add(8 * full).cast());
            let c = _mm512_maskz_loadu_epi64(tail, cand.as_ptr().add(8 * full).cast());
            acc = _mm512_add_epi64(acc, _mm512_popcnt_epi64(_mm512_xor_si512(q, c)));
        }
        let ham = _mm512_reduce_add_epi64(acc) as u32;
        if ham < best {
            best = ham;
            best_shift = k;
        }
    }
    (best_shift, best)
}

#[cfg(target_arch = "x86_64")]
static X86_LEVEL: LazyLock<u8> = LazyLock::new(|| {
    if std::arch::is_x86_feature_detected!("avx512f")
        && std::arch::is_x86_feature_detected!("avx512vpopcntdq")
        && std::arch::is_x86_feature_detected!("popcnt")
    {
        3
    } else if std::arch::is_x86_feature_detected!("avx2")
        && std::arch::is_x86_feature_detected!("popcnt")
    {
        2
    } else if std::arch::is_x86_feature_detected!("popcnt") {
        1
    } else {
        0
    }
});

#[inline]
fn run_shift_scan(qq: &[u64], cand: &[u64], n: usize, wpc: usize) -> (usize, u32) {
    #[cfg(target_arch = "x86_64")]
    {
        // Safety: the feature level is probed at first use.
        match *X86_LEVEL {
            3 => return unsafe { shift_scan_avx512(qq, cand, n, wpc) },
            2 => return unsafe { shift_scan_avx2(qq, cand, n, wpc) },
            1 => return unsafe { shift_scan_popcnt(qq, cand, n, wpc) },
            _ => {}
        }
    }
    shift_scan(qq, cand, n, wpc)
}

/// Finds the query rotation minimizing cell disagreement against the
/// candidate. Ties resolve to the smallest rotation.
pub fn best_alignment(query: &DoubledMask, cand: &PackedMask) -> Alignment {
    debug_assert_eq!(query.n_rings, cand.n_rings);
    debug_assert_eq!(query.n_sectors, cand.n_sectors);
    let (shift, hamming) =
        run_shift_scan(&query.words, &cand.words, cand.n_sectors, cand.words_per_col);
    let cells = (cand.n_rings * cand.n_sectors) as f64;
    Alignment { shift, hamming, geometry: 1.0 - hamming as f64 / cells }
}

fn column_cosine(a: &Isc, col_a: usize, b: &Isc, col_b: usize) -> f64 {
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for r in 0..a.n_rings {
        let x = a.cell(r, col_a) as f64;
        let y = b.cell(r, col_b) as f64;
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    // Empty columns carry no signal: two empties agree perfectly, an empty
    // against a filled column not at all.
    if norm_a == 0.0 && norm_b == 0.0 {
        return 1.0;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    if dot == norm_a && dot == norm_b {
        // Identical accumulations mean the columns are equal; report 1
        // without going through sqrt so self-matches score exactly 1.
        return 1.0;
    }
    (dot / (norm_a * norm_b).sqrt()).clamp(0.0, 1.0)
}

/// Mean column-wise cosine similarity with the query rotated by `shift`:
/// query column `j` is compared against candidate column `(j + shift) mod
/// n_sectors`.
pub fn intensity_similarity(query: &Isc, cand: &Isc, shift: usize) -> f64 {
    assert_eq!(query.n_rings, cand.n_rings);
    assert_eq!(query.n_sectors, cand.n_sectors);
    let n = query.n_sectors;
    let mut sum = 0.0f64;
    for j in 0..n {
        sum += column_cosine(query, j, cand, (j + shift) % n);
    }
    sum / n as f64
}

/// Geometry and intensity agreement of one frame pair at the pair's own best
/// rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub shift: usize,
    pub geometry: f64,
    pub intensity: f64,
}

/// Scores a single query/candidate pair through both stages, regardless of
/// thresholds.
pub fn match_pair(query: &Isc, query_mask: &PackedMask, cand: &Isc, cand_mask: &PackedMask) -> PairScore {
    let alignment = best_alignment(&query_mask.doubled(), cand_mask);
    let intensity = intensity_similarity(query, cand, alignment.shift);
    PairScore { shift: alignment.shift, geometry: alignment.geometry, intensity }
}

/// Acceptance thresholds for the two retrieval stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    /// Minimum geometric agreement fraction to enter stage two.
    pub eps_geometry: f64,
    /// Minimum intensity similarity to be retrieved.
    pub eps_intensity: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { eps_geometry: 0.9, eps_intensity: 0.92 }
    }
}

/// A frame retrieved from the database.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievedMatch {
    /// Position within the searched entry slice.
    pub position: usize,
    /// Frame id stored with the entry.
    pub frame: u64,
    pub shift: usize,
    pub geometry: f64,
    pub intensity: f64,
}

/// One stored frame: descriptor plus its precomputed mask.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub frame: u64,
    pub isc: Isc,
    pub mask: PackedMask,
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a descriptor database (bad magic)")]
    BadMagic,
    #[error("implausible database header: {reason}")]
    BadHeader { reason: String },
    #[error(
        "descriptor shape {got_rings}x{got_sectors} does not match database \
         {db_rings}x{db_sectors}"
    )]
    ShapeMismatch {
        got_rings: usize,
        got_sectors: usize,
        db_rings: usize,
        db_sectors: usize,
    },
    #[error("frame {frame}: stored occupancy mask disagrees with its cells")]
    MaskMismatch { frame: u64 },
    #[error("trailing bytes after the last descriptor")]
    TrailingData,
}

const DB_MAGIC: [u8; 8] = *b"ISCDB1\0\0";

/// An append-only store of frame descriptors, searchable by the two-stage
/// retrieval and serializable to a flat binary file.
#[derive(Debug, Clone)]
pub struct DescriptorDb {
    params: GridParams,
    entries: Vec<DbEntry>,
}

impl DescriptorDb {
    pub fn new(params: GridParams) -> Self {
        Self { params, entries: Vec::new() }
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// Appends a frame, packing its mask. The descriptor must match the
    /// database grid.
    pub fn push(&mut self, frame: u64, isc: Isc) -> Result<(), DbError> {
        if isc.n_rings != self.params.n_rings || isc.n_sectors != self.params.n_sectors {
            return Err(DbError::ShapeMismatch {
                got_rings: isc.n_rings,
                got_sectors: isc.n_sectors,
                db_rings: self.params.n_rings,
                db_sectors: self.params.n_sectors,
            });
        }
        let mask = PackedMask::from_isc(&isc);
        self.entries.push(DbEntry { frame, isc, mask });
        Ok(())
    }

    /// Serializes the database: magic `ISCDB1` padded to 8 bytes, then
    /// little-endian `u32` ring and sector counts, `f64` grid radius, `u64`
    /// entry count, then per entry a `u64` frame id, the row-major `f32`
    /// cells, and the packed mask words (`n_sectors * ceil(n_rings / 64)`
    /// little-endian `u64`, column-major).
    pub fn save(&self, w: &mut impl Write) -> Result<(), DbError> {
        w.write_all(&DB_MAGIC)?;
        w.write_all(&(self.params.n_rings as u32).to_le_bytes())?;
        w.write_all(&(self.params.n_sectors as u32).to_le_bytes())?;
        w.write_all(&self.params.l_max.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for entry in &self.entries {
            w.write_all(&entry.frame.to_le_bytes())?;
            for &cell in entry.isc.cells() {
                w.write_all(&cell.to_le_bytes())?;
            }
            for &word in entry.mask.words() {
                w.write_all(&word.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), DbError> {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        self.save(&mut file)?;
        file.flush()?;
        Ok(())
    }

    /// Reads a database written by [`DescriptorDb::save`]. Masks are
    /// recomputed from the cells and checked against the stored words, so a
    /// file whose redundant halves drifted apart is rejected instead of
    /// searched inconsistently.
    pub fn load(r: &mut impl Read) -> Result<Self, DbError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != DB_MAGIC {
            return Err(DbError::BadMagic);
        }
        let mut u32_buf = [0u8; 4];
        r.read_exact(&mut u32_buf)?;
        let n_rings = u32::from_le_bytes(u32_buf) as usize;
        r.read_exact(&mut u32_buf)?;
        let n_sectors = u32::from_le_bytes(u32_buf) as usize;
        let mut f64_buf = [0u8; 8];
        r.read_exact(&mut f64_buf)?;
        let l_max = f64::from_le_bytes(f64_buf);
        let params = GridParams { n_rings, n_sectors, l_max };
        if let Err(reason) = params.validate() {
            return Err(DbError::BadHeader { reason });
        }
        if n_rings > 65_536 || n_sectors > 65_536 {
            return Err(DbError::BadHeader {
                reason: format!("grid {n_rings}x{n_sectors} is implausibly large"),
            });
        }
        let mut u64_buf = [0u8; 8];
        r.read_exact(&mut u64_buf)?;
        let count = u64::from_le_bytes(u64_buf);
        let mut db = Self::new(params);
        let cells_per = n_rings * n_sectors;
        let mut cell_bytes = vec![0u8; cells_per * 4];
        let mut word_bytes = vec![0u8; n_sectors * n_rings.div_ceil(64) * 8];
        for _ in 0..count {
            r.read_exact(&mut u64_buf)?;
            let frame = u64::from_le_bytes(u64_buf);
            r.read_exact(&mut cell_bytes)?;
            let cells: Vec<f32> = cell_bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            r.read_exact(&mut word_bytes)?;
            db.push(frame, Isc::from_cells(n_rings, n_sectors, cells))?;
            let rebuilt = db.entries.last().expect("just pushed");
            let stored = word_bytes
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()));
            if !stored.eq(rebuilt.mask.words().iter().copied()) {
                return Err(DbError::MaskMismatch { frame });
            }
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(DbError::TrailingData);
        }
        Ok(db)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, DbError> {
        let mut file = io::BufReader::new(fs::File::open(path)?);
        Self::load(&mut file)
    }
}

/// Runs both retrieval stages for a query descriptor over a slice of
/// database entries.
///
/// Every entry goes through the rotation search; entries at or above the
/// geometric threshold are re-scored by intensity, and the best
/// intensity-scoring entry at or above the intensity threshold is returned
/// (ties resolve to the earliest entry). `None` means nothing survived both
/// stages.
pub fn query_database(entries: &[DbEntry], query: &Isc, params: &SearchParams) -> Option<RetrievedMatch> {
    let query_mask = PackedMask::from_isc(query);
    let doubled = query_mask.doubled();
    let mut best: Option<RetrievedMatch> = None;
    for (position, entry) in entries.iter().enumerate() {
        let alignment = best_alignment(&doubled, &entry.mask);
        if alignment.geometry < params.eps_geometry {
            continue;
        }
        let intensity = intensity_similarity(query, &entry.isc, alignment.shift);
        if intensity < params.eps_intensity {
            continue;
        }
        let better = match &best {
            Some(b) => intensity > b.intensity,
            None => true,
        };
        if better {
            best = Some(RetrievedMatch {
                position,
                frame: entry.frame,
                shift: alignment.shift,
                geometry: alignment.geometry,
                intensity,
            });
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn isc_from_bits(n_rings: usize, n_sectors: usize, bits: &[u8]) -> Isc {
        Isc::from_cells(
            n_rings,
            n_sectors,
            bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Reference rotation search working directly on cells, independent of
    /// the bit packing and the scan kernel.
    fn brute_force_alignment(query: &Isc, cand: &Isc) -> (usize, u32) {
        let n = query.n_sectors;
        let mut best = (0usize, u32::MAX);
        for k in 0..n {
            let shifted = query.shift_columns(k);
            let mut ham = 0u32;
            for r in 0..query.n_rings {
                for j in 0..n {
                    if (shifted.cell(r, j) > 0.0) != (cand.cell(r, j) > 0.0) {
                        ham += 1;
                    }
                }
            }
            if ham < best.1 {
                best = (k, ham);
            }
        }
        best
    }

    #[test]
    fn mask_packs_filled_cells() {
        let isc = isc_from_bits(3, 2, &[1, 0, 0, 1, 1, 0]);
        let mask = PackedMask::from_isc(&isc);
        assert_eq!(mask.words_per_col, 1);
        assert!(mask.filled(0, 0));
        assert!(!mask.filled(0, 1));
        assert!(mask.filled(1, 1));
        assert!(mask.filled(2, 0));
        assert_eq!(mask.ones(), 3);
    }

    #[test]
    fn mask_spans_multiple_words_for_tall_grids() {
        let mut bits = vec![0u8; 100 * 2];
        bits[99 * 2] = 1; // ring 99, sector 0
        bits[40 * 2 + 1] = 1; // ring 40, sector 1
        let mask = PackedMask::from_isc(&isc_from_bits(100, 2, &bits));
        assert_eq!(mask.words_per_col, 2);
        assert!(mask.filled(99, 0));
        assert!(mask.filled(40, 1));
        assert_eq!(mask.ones(), 2);
    }

    /// Splitmix-style generator so the kernel fuzzing below needs no seeds
    /// or external state.
    fn mix(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Every specialized scan kernel the build carries must agree with the
    /// portable one; each variant runs only where the host supports it.
    #[test]
    fn every_compiled_kernel_agrees_with_the_portable_scan() {
        let mut state = 1u64;
        for (n_rings, n_sectors) in [(60usize, 20usize), (70, 24), (130, 12), (64, 3)] {
            for _ in 0..50 {
                let mut random_mask = || {
                    let bits: Vec<u8> = (0..n_rings * n_sectors)
                        .map(|_| u8::from(mix(&mut state) % 100 < 35))
                        .collect();
                    PackedMask::from_isc(&isc_from_bits(n_rings, n_sectors, &bits))
                };
                let query = random_mask().doubled();
                let cand = random_mask();
                let wpc = cand.words_per_col;
                let want = shift_scan(&query.words, &cand.words, n_sectors, wpc);
                #[cfg(target_arch = "x86_64")]
                {
                    use std::arch::is_x86_feature_detected;
                    // Safety: each kernel runs only behind its feature probe.
                    if is_x86_feature_detected!("popcnt") {
                        let got =
                            unsafe { shift_scan_popcnt(&query.words, &cand.words, n_sectors, wpc) };
                        assert_eq!(got, want, "popcnt kernel, {n_rings}x{n_sectors}");
                    }
                    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("popcnt") {
                        let got =
                            unsafe { shift_scan_avx2(&query.words, &cand.words, n_sectors, wpc) };
                        assert_eq!(got, want, "avx2 kernel, {n_rings}x{n_sectors}");
                    }
                    if is_x86_feature_detected!("avx512f")
                        && is_x86_feature_detected!("avx512vpopcntdq")
                        && is_x86_feature_detected!("popcnt")
                    {
                        let got =
                            unsafe { shift_scan_avx512(&query.words, &cand.words, n_sectors, wpc) };
                        assert_eq!(got, want, "avx512 kernel, {n_rings}x{n_sectors}");
                    }
                }
            }
        }
    }

    #[test]
    fn self_alignment_is_perfect() {
        let isc = isc_from_bits(4, 5, &[1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0]);
        let mask = PackedMask::from_isc(&isc);
        let a = best_alignment(&mask.doubled(), &mask);
        assert_eq!(a.shift, 0);
        assert_eq!(a.hamming, 0);
        assert_eq!(a.geometry, 1.0);
    }

    #[test]
    fn rotation_is_recovered_as_complementary_shift() {
        // Query equal to the candidate rotated by 5 re-aligns at shift 15.
        let cells: Vec<f32> = (0..60 * 20).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let cand = Isc::from_cells(60, 20, cells);
        let query = cand.shift_columns(5);
        let a = best_alignment(&PackedMask::from_isc(&query).doubled(), &PackedMask::from_isc(&cand));
        assert_eq!(a.shift, 15);
        assert_eq!(a.hamming, 0);
        assert_eq!(a.geometry, 1.0);
    }

    #[test]
    fn one_cell_disagreement_on_eight_cells() {
        // 2x4 grids differing in a single cell: agreement 1 - 1/8 = 0.875.
        let full = isc_from_bits(2, 4, &[1; 8]);
        let dented = isc_from_bits(2, 4, &[1, 1, 1, 0, 1, 1, 1, 1]);
        let a = best_alignment(&PackedMask::from_isc(&full).doubled(), &PackedMask::from_isc(&dented));
        assert_eq!(a.hamming, 1);
        assert_eq!(a.geometry, 0.875);
    }

    #[test]
    fn intensity_self_similarity_is_exactly_one() {
        let cells: Vec<f32> = (0..60 * 20).map(|i| ((i * 13) % 7) as f32 / 7.0).collect();
        let isc = Isc::from_cells(60, 20, cells);
        assert_eq!(intensity_similarity(&isc, &isc, 0), 1.0);
    }

    #[test]
    fn intensity_at_complementary_shift_of_rotation_is_one() {
        let cells: Vec<f32> = (0..60 * 20).map(|i| ((i * 13) % 7) as f32 / 7.0).collect();
        let cand = Isc::from_cells(60, 20, cells);
        let query = cand.shift_columns(5);
        assert_eq!(intensity_similarity(&query, &cand, 15), 1.0);
    }

    #[test]
    fn empty_columns_follow_agreement_rules() {
        // Four sectors: three identical columns and one empty-vs-filled
        // column give (1 + 1 + 1 + 0) / 4 = 0.75.
        let query = Isc::from_cells(2, 4, vec![0.5, 0.2, 0.9, 0.0, 0.1, 0.8, 0.4, 0.0]);
        let cand = Isc::from_cells(2, 4, vec![0.5, 0.2, 0.9, 0.3, 0.1, 0.8, 0.4, 0.6]);
        assert_eq!(intensity_similarity(&query, &cand, 0), 0.75);
        // Both empty counts as agreement.
        let both_empty = Isc::from_cells(2, 4, vec![0.5, 0.2, 0.9, 0.0, 0.1, 0.8, 0.4, 0.0]);
        assert_eq!(intensity_similarity(&query, &both_empty, 0), 1.0);
    }

    #[test]
    fn match_pair_reports_rotation_and_scores() {
        let cells: Vec<f32> = (0..60 * 20).map(|i| ((i * 29) % 13) as f32 / 13.0).collect();
        let cand = Isc::from_cells(60, 20, cells);
        let query = cand.shift_columns(7);
        let score = match_pair(
            &query,
            &PackedMask::from_isc(&query),
            &cand,
            &PackedMask::from_isc(&cand),
        );
        assert_eq!(score.shift, 13);
        assert_eq!(score.geometry, 1.0);
        assert_eq!(score.intensity, 1.0);
    }

    fn planted_db() -> (DescriptorDb, Isc) {
        let params = GridParams::default();
        let mut db = DescriptorDb::new(params);
        for f in 0..30u64 {
            let cells: Vec<f32> = (0..60 * 20)
                .map(|i| ((i as u64 * 31 + f * 977) % 17) as f32 / 17.0)
                .collect();
            db.push(f, Isc::from_cells(60, 20, cells)).unwrap();
        }
        let target = db.entries()[12].isc.clone();
        (db, target.shift_columns(3))
    }

    #[test]
    fn query_retrieves_planted_rotated_frame() {
        let (db, query) = planted_db();
        let hit = query_database(db.entries(), &query, &SearchParams::default()).unwrap();
        assert_eq!(hit.frame, 12);
        assert_eq!(hit.position, 12);
        assert_eq!(hit.shift, 17);
        assert_eq!(hit.geometry, 1.0);
        assert_eq!(hit.intensity, 1.0);
    }

    #[test]
    fn query_returns_none_when_nothing_passes() {
        let (db, _) = planted_db();
        // A descriptor with every cell filled at uniform intensity shares no
        // structure with the stored frames.
        let query = Isc::from_cells(60, 20, vec![1.0; 60 * 20]);
        assert!(query_database(db.entries(), &query, &SearchParams::default()).is_none());
    }

    #[test]
    fn query_on_empty_database_is_none() {
        let db = DescriptorDb::new(GridParams::default());
        let query = Isc::zeros(60, 20);
        assert!(query_database(db.entries(), &query, &SearchParams::default()).is_none());
    }

    #[test]
    fn push_rejects_mismatched_shape() {
        let mut db = DescriptorDb::new(GridParams::default());
        let err = db.push(0, Isc::zeros(10, 20)).unwrap_err();
        assert!(matches!(err, DbError::ShapeMismatch { got_rings: 10, .. }));
    }

    #[test]
    fn database_round_trips_bit_exactly() {
        let (db, _) = planted_db();
        let mut bytes = Vec::new();
        db.save(&mut bytes).unwrap();
        let reloaded = DescriptorDb::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(reloaded.len(), db.len());
        assert_eq!(reloaded.params(), db.params());
        for (a, b) in db.entries().iter().zip(reloaded.entries()) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.isc, b.isc);
            assert_eq!(a.mask, b.mask);
        }
        let mut again = Vec::new();
        reloaded.save(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn load_rejects_bad_magic_and_trailing_data() {
        let err = DescriptorDb::load(&mut &b"NOTADB!!rest"[..]).unwrap_err();
        assert!(matches!(err, DbError::BadMagic));

        let (db, _) = planted_db();
        let mut bytes = Vec::new();
        db.save(&mut bytes).unwrap();
        bytes.push(0);
        let err = DescriptorDb::load(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, DbError::TrailingData));
    }

    #[test]
    fn load_rejects_truncated_entries() {
        let (db, _) = planted_db();
        let mut bytes = Vec::new();
        db.save(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = DescriptorDb::load(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, DbError::Io(_)));
    }

    #[test]
    fn load_rejects_mask_words_that_disagree_with_cells() {
        let (db, _) = planted_db();
        let mut bytes = Vec::new();
        db.save(&mut bytes).unwrap();
        // Flip a padding-free bit inside the first entry's mask block: the
        // block sits after the 32-byte header, the frame id, and the cells.
        let params = db.params();
        let mask_start = 32 + 8 + params.n_rings * params.n_sectors * 4;
        bytes[mask_start] ^= 1;
        let err = DescriptorDb::load(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, DbError::MaskMismatch { frame: 0 }), "{err:?}");
    }

    proptest! {
        #[test]
        fn alignment_matches_brute_force(
            n_rings in 1usize..80,
            n_sectors in 1usize..12,
            seed in any::<u64>(),
        ) {
            let cells = |salt: u64| -> Vec<f32> {
                (0..n_rings * n_sectors)
                    .map(|i| {
                        let h = (i as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ seed ^ salt;
                        if h.is_multiple_of(3) { 0.0 } else { (h % 97) as f32 / 97.0 }
                    })
                    .collect()
            };
            let query = Isc::from_cells(n_rings, n_sectors, cells(1));
            let cand = Isc::from_cells(n_rings, n_sectors, cells(2));
            let a = best_alignment(
                &PackedMask::from_isc(&query).doubled(),
                &PackedMask::from_isc(&cand),
            );
            let (want_shift, want_ham) = brute_force_alignment(&query, &cand);
            prop_assert_eq!(a.hamming, want_ham);
            prop_assert_eq!(a.shift, want_shift);
            prop_assert!((0.0..=1.0).contains(&a.geometry));
        }

        #[test]
        fn intensity_similarity_stays_in_unit_interval(
            q in proptest::collection::vec(0.0f32..=1.0, 5 * 4),
            c in proptest::collection::vec(0.0f32..=1.0, 5 * 4),
            shift in 0usize..4,
        ) {
            let query = Isc::from_cells(5, 4, q);
            let cand = Isc::from_cells(5, 4, c);
            let phi = intensity_similarity(&query, &cand, shift);
            prop_assert!((0.0..=1.0).contains(&phi));
        }

        #[test]
        fn query_matches_exhaustive_reference(
            seed in any::<u64>(),
            db_size in 1usize..12,
        ) {
            let n_rings = 8;
            let n_sectors = 6;
            let params = GridParams { n_rings, n_sectors, l_max: 50.0 };
            let cells = |salt: u64| -> Vec<f32> {
                (0..n_rings * n_sectors)
                    .map(|i| {
                        let h = (i as u64).wrapping_mul(0x2545f4914f6cdd1d) ^ seed ^ salt.wrapping_mul(0xd6e8feb86659fd93);
                        if h.is_multiple_of(4) { 0.0 } else { (h % 31) as f32 / 31.0 }
                    })
                    .collect()
            };
            let mut db = DescriptorDb::new(params);
            for f in 0..db_size as u64 {
                db.push(f, Isc::from_cells(n_rings, n_sectors, cells(f + 1))).unwrap();
            }
            let query = Isc::from_cells(n_rings, n_sectors, cells(0));
            // Loose thresholds so the reference path actually exercises the
            // argmax, not just the filters.
            let sp = SearchParams { eps_geometry: 0.5, eps_intensity: 0.5 };

            let mut want: Option<RetrievedMatch> = None;
            for (position, entry) in db.entries().iter().enumerate() {
                let (shift, ham) = brute_force_alignment(&query, &entry.isc);
                let geometry = 1.0 - ham as f64 / (n_rings * n_sectors) as f64;
                if geometry < sp.eps_geometry {
                    continue;
                }
                let intensity = intensity_similarity(&query, &entry.isc, shift);
                if intensity < sp.eps_intensity {
                    continue;
                }
                if want.is_none_or(|w| intensity > w.intensity) {
                    want = Some(RetrievedMatch {
                        position,
                        frame: entry.frame,
                        shift,
                        geometry,
                        intensity,
                    });
                }
            }
            let got = query_database(db.entries(), &query, &sp);
            prop_assert_eq!(got, want);
        }
    }
}
