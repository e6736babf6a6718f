//! Bird's-eye-view grid geometry and boolean rasters.
//!
//! Rows run along the lateral axis (row 0 at `y_min`), columns along the
//! forward axis (column 0 at `x_min`), so a BEV tensor is
//! `rows × cols × channels`, e.g. 200 × 600 at 0.15 m.

use serde::{Deserialize, Serialize};

use crate::error::{BevError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Meters per cell.
    pub resolution: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BevConfig {
    /// 0.15 m cells over `[0, 90] × [-15, 15]`: 200 × 600.
    pub fn full_scale() -> Self {
        BevConfig {
            x_min: 0.0,
            x_max: 90.0,
            y_min: -15.0,
            y_max: 15.0,
            resolution: 0.15,
        }
    }

    /// Same extent at 0.75 m: 40 × 120.
    pub fn toy() -> Self {
        BevConfig {
            resolution: 0.75,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let exact = |span: f64| {
            let n = span / self.resolution;
            n >= 1.0 && (n - n.round()).abs() < 1e-6
        };
        if !(self.resolution > 0.0)
            || !exact(self.x_max - self.x_min)
            || !exact(self.y_max - self.y_min)
        {
            return Err(BevError::param(format!(
                "BEV extent [{}, {}] x [{}, {}] is not a whole number of {} m cells",
                self.x_min, self.x_max, self.y_min, self.y_max, self.resolution
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Cell containing a metric point; the far edges belong to the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max) {
            return None;
        }
        let c = (((x - self.x_min) / self.resolution).floor() as usize).min(self.cols() - 1);
        let r = (((y - self.y_min) / self.resolution).floor() as usize).min(self.rows() - 1);
        Some((r, c))
    }

    /// Metric center of a cell as `(x, y)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn for_grid(bev: &BevConfig) -> Self {
        Self::new(bev.rows(), bev.cols())
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize) {
        self.data[r * self.cols + c] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap(&self, other: &Mask) -> (usize, usize) {
        self.data
            .iter()
            .zip(&other.data)
            .fold((0, 0), |(i, u), (&a, &b)| (i + (a && b) as usize, u + (a || b) as usize))
    }

    /// Chebyshev dilation by `radius` cells.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::new(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.get(r, c) {
                    continue;
                }
                for rr in r.saturating_sub(radius)..(r + radius + 1).min(self.rows) {
                    for cc in c.saturating_sub(radius)..(c + radius + 1).min(self.cols) {
                        out.set(rr, cc);
                    }
                }
            }
        }
        out
    }

    /// Set cells as `(row, col)` in row-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_extents() {
        let p = BevConfig::full_scale();
        p.validate().unwrap();
        assert_eq!((p.rows(), p.cols()), (200, 600));
        let t = BevConfig::toy();
        t.validate().unwrap();
        assert_eq!((t.rows(), t.cols()), (40, 120));
        let bad = BevConfig {
            resolution: 0.7,
            ..t
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cell_lookup_round_trips_centers() {
        let t = BevConfig::toy();
        for &(r, c) in &[(0, 0), (39, 119), (20, 60)] {
            let (x, y) = t.center(r, c);
            assert_eq!(t.cell_of(x, y), Some((r, c)));
        }
        assert_eq!(t.cell_of(90.0, 15.0), Some((39, 119)));
        assert_eq!(t.cell_of(-0.01, 0.0), None);
    }
}
