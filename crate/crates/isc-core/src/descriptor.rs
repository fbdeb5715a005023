//! The intensity scan context descriptor.
//!
//! A scan is summarized as an `n_rings x n_sectors` matrix over a polar grid
//! centered on the sensor: rings divide planar range `[0, l_max]` evenly,
//! sectors divide azimuth `[0, 2pi)` evenly, and each cell stores the maximum
//! calibrated intensity of the points that fall inside it (0 for empty
//! cells). Sensor yaw shows up as a pure column rotation of the matrix, which
//! is what the retrieval stage exploits.

use std::f64::consts::TAU;
use std::io::{self, Write};

use crate::ingest::PointCloud;

/// Grid geometry for descriptor extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    /// Ring (range bin) count.
    pub n_rings: usize,
    /// Sector (azimuth bin) count.
    pub n_sectors: usize,
    /// Planar radius covered by the outermost ring, in meters.
    pub l_max: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { n_rings: 60, n_sectors: 20, l_max: 50.0 }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_rings == 0 || self.n_sectors == 0 {
            return Err(format!(
                "grid must be non-empty, got {}x{}",
                self.n_rings, self.n_sectors
            ));
        }
        if self.l_max <= 0.0 || !self.l_max.is_finite() {
            return Err(format!("l_max must be positive, got {}", self.l_max));
        }
        Ok(())
    }
}

/// An intensity scan context: row-major `n_rings x n_sectors` cell matrix
/// with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Isc {
    pub n_rings: usize,
    pub n_sectors: usize,
    cells: Vec<f32>,
}

impl Isc {
    /// All-zero descriptor of the given shape.
    pub fn zeros(n_rings: usize, n_sectors: usize) -> Self {
        Self { n_rings, n_sectors, cells: vec![0.0; n_rings * n_sectors] }
    }

    /// Builds the descriptor from an already calibrated and filtered cloud.
    ///
    /// Points exactly at `l_max` land in the outermost ring, and points at or
    /// beyond `l_max` (present only if upstream filtering was skipped) are
    /// clamped into it rather than dropped.
    pub fn from_cloud(cloud: &PointCloud, params: &GridParams) -> Self {
        let mut isc = Self::zeros(params.n_rings, params.n_sectors);
        let ring_width = params.l_max / params.n_rings as f64;
        let sector_width = TAU / params.n_sectors as f64;
        for p in &cloud.points {
            let rho = p.planar_range();
            let ring = ((rho / ring_width) as usize).min(params.n_rings - 1);
            // atan2 returns (-pi, pi]; lift into [0, 2pi) before binning.
            let theta = p.y.atan2(p.x).rem_euclid(TAU);
            let sector = ((theta / sector_width) as usize).min(params.n_sectors - 1);
            let cell = &mut isc.cells[ring * params.n_sectors + sector];
            *cell = cell.max(p.intensity);
        }
        isc
    }

    /// Reconstructs a descriptor from raw cells (row-major, `n_rings *
    /// n_sectors` values), as stored in a descriptor database.
    pub fn from_cells(n_rings: usize, n_sectors: usize, cells: Vec<f32>) -> Self {
        assert_eq!(cells.len(), n_rings * n_sectors, "cell count does not match shape");
        Self { n_rings, n_sectors, cells }
    }

    #[inline]
    pub fn cell(&self, ring: usize, sector: usize) -> f32 {
        self.cells[ring * self.n_sectors + sector]
    }

    #[inline]
    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    /// One sector's cells (ring 0 outward), gathered into a vector.
    pub fn column(&self, sector: usize) -> Vec<f32> {
        (0..self.n_rings).map(|r| self.cell(r, sector)).collect()
    }

    /// Rotates the matrix column-wise: column `j` of the input becomes column
    /// `(j + shift) mod n_sectors` of the output. A sensor yawed by
    /// `2pi * shift / n_sectors` produces (up to sampling) this rotation of
    /// the original descriptor.
    pub fn shift_columns(&self, shift: usize) -> Self {
        let n = self.n_sectors;
        let shift = shift % n;
        let mut out = Self::zeros(self.n_rings, n);
        for r in 0..self.n_rings {
            let row = &self.cells[r * n..(r + 1) * n];
            let dst = &mut out.cells[r * n..(r + 1) * n];
            for j in 0..n {
                dst[(j + shift) % n] = row[j];
            }
        }
        out
    }

    /// Fraction of non-empty cells, useful as a degeneracy check.
    pub fn occupancy(&self) -> f64 {
        let filled = self.cells.iter().filter(|&&c| c > 0.0).count();
        filled as f64 / self.cells.len() as f64
    }

    /// Writes the descriptor as a binary PGM image (`P5`), one pixel per
    /// cell: width `n_sectors`, height `n_rings`, ring 0 as the top row,
    /// gray value `round(cell * 255)`.
    pub fn write_pgm(&self, w: &mut impl Write) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.n_sectors, self.n_rings)?;
        let bytes: Vec<u8> = self
            .cells
            .iter()
            .map(|&c| (f32::clamp(c, 0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }
}
