use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{BoxRegion, Point};

/// Regular partition of a box into `resolution[i]` cells along axis `i`,
/// cells numbered with axis 0 varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub region: BoxRegion,
    pub resolution: Vec<usize>,
}

impl Grid {
    pub fn new(region: BoxRegion, resolution: Vec<usize>) -> Result<Self> {
        if resolution.len() != region.dim() || resolution.contains(&0) {
            return Err(Error::invalid("grid needs one positive resolution per axis"));
        }
        Ok(Self { region, resolution })
    }

    pub fn uniform(region: BoxRegion, per_axis: usize) -> Result<Self> {
        let d = region.dim();
        Self::new(region, vec![per_axis; d])
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        self.region.width(axis) / self.resolution[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.cell_width(i)).product()
    }

    /// The cell containing `p`, or `None` outside the box. Periodic axes are
    /// reduced first.
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        let mut idx = 0usize;
        for i in 0..self.dim() {
            let mut v = p[i];
            let (lo, w) = (self.region.lower[i], self.region.width(i));
            if self.region.periodic[i] {
                v = lo + (v - lo).rem_euclid(w);
            } else if v < lo || v > lo + w {
                return None;
            }
            let k = (((v - lo) / w) * self.resolution[i] as f64).floor() as isize;
            let k = k.clamp(0, self.resolution[i] as isize - 1) as usize;
            idx = idx * self.resolution[i] + k;
        }
        Some(idx)
    }

    /// Per-axis indices of cell `c`.
    pub fn cell_coords(&self, mut c: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for i in (0..self.dim()).rev() {
            out[i] = c % self.resolution[i];
            c /= self.resolution[i];
        }
        out
    }

    pub fn cell_lower(&self, c: usize) -> Point {
        let k = self.cell_coords(c);
        Point::from_iterator(self.dim(), (0..self.dim()).map(|i| self.region.lower[i] + k[i] as f64 * self.cell_width(i)))
    }

    pub fn cell_center(&self, c: usize) -> Point {
        let mut p = self.cell_lower(c);
        for i in 0..self.dim() {
            p[i] += 0.5 * self.cell_width(i);
        }
        p
    }

    /// The grid with `factor` fine cells merged along every axis.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.resolution.iter().any(|r| r % factor != 0) {
            return Err(Error::invalid(format!("cannot coarsen resolution {:?} by {factor}", self.resolution)));
        }
        Self::new(self.region.clone(), self.resolution.iter().map(|r| r / factor).collect())
    }

    /// Maps a fine cell to the cell of `coarse` containing it.
    fn coarse_cell(&self, coarse: &Grid, c: usize) -> usize {
        let k = self.cell_coords(c);
        let mut idx = 0;
        for i in 0..self.dim() {
            let f = self.resolution[i] / coarse.resolution[i];
            idx = idx * coarse.resolution[i] + k[i] / f;
        }
        idx
    }
}

/// A probability vector on the cells of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub grid: Grid,
    pub weights: Vec<f64>,
    pub sample_count: u64,
}

impl EmpiricalMeasure {
    /// Normalises non-negative weights (counts or masses).
    pub fn from_weights(grid: Grid, weights: Vec<f64>, sample_count: u64) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::invalid("weight vector does not match the grid"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InsufficientSample("measure has no mass".into()));
        }
        Ok(Self { grid, weights: weights.into_iter().map(|w| w / total).collect(), sample_count })
    }

    pub fn uniform(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, weights: vec![1.0 / n as f64; n], sample_count: 0 }
    }

    /// Histogram of points; points outside the box are an error.
    pub fn from_points<'a, I: IntoIterator<Item = &'a Point>>(grid: Grid, points: I) -> Result<Self> {
        let mut counts = vec![0.0; grid.len()];
        let mut n = 0u64;
        for p in points {
            let c = grid.cell_of(p).ok_or_else(|| Error::Escape { step: n as usize, detail: format!("sample {:?} outside the grid", p.as_slice()) })?;
            counts[c] += 1.0;
            n += 1;
        }
        Self::from_weights(grid, counts, n)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The measure on a coarser grid of the same box.
    pub fn coarsen_to(&self, coarse: &Grid) -> Result<Self> {
        if coarse.region != self.grid.region
            || coarse.resolution.iter().zip(&self.grid.resolution).any(|(c, f)| *c == 0 || f % c != 0)
        {
            return Err(Error::invalid("target grid is not a coarsening of this grid"));
        }
        let mut w = vec![0.0; coarse.len()];
        for (c, m) in self.weights.iter().enumerate() {
            w[self.grid.coarse_cell(coarse, c)] += m;
        }
        Ok(Self { grid: coarse.clone(), weights: w, sample_count: self.sample_count })
    }

    /// L¹ distance, after coarsening the finer measure to the coarser grid.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        let (a, b) = if self.grid.resolution == other.grid.resolution {
            (self.clone(), other.clone())
        } else {
            let common: Vec<usize> = self.grid.resolution.iter().zip(&other.grid.resolution).map(|(x, y)| *x.min(y)).collect();
            let g = Grid::new(self.grid.region.clone(), common)?;
            (self.coarsen_to(&g)?, other.coarsen_to(&g)?)
        };
        if a.grid.region != b.grid.region {
            return Err(Error::invalid("measures live on different boxes"));
        }
        Ok(a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// CSV with header `cell,c0,…,weight` (cell centers).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.grid.dim();
        let header: Vec<String> =
            std::iter::once("cell".to_string()).chain((0..d).map(|i| format!("c{i}"))).chain(std::iter::once("weight".into())).collect();
        writeln!(out, "{}", header.join(","))?;
        for (c, w) in self.weights.iter().enumerate() {
            let center = self.grid.cell_center(c);
            let coords: Vec<String> = center.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{c},{},{w:.17e}", coords.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square(n: usize) -> Grid {
        Grid::uniform(BoxRegion::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![true, true]).unwrap(), n).unwrap()
    }

    #[test]
    fn cell_indexing_roundtrip() {
        let g = unit_square(8);
        for c in 0..g.len() {
            assert_eq!(g.cell_of(&g.cell_center(c)), Some(c));
        }
        assert_eq!(g.cell_of(&Point::from_vec(vec![1.0, 0.0])), Some(0));
        let b = Grid::uniform(BoxRegion::new(vec![-1.0], vec![1.0], vec![false]).unwrap(), 4).unwrap();
        assert_eq!(b.cell_of(&Point::from_vec(vec![1.0])), Some(3));
        assert_eq!(b.cell_of(&Point::from_vec(vec![1.5])), None);
    }

    #[test]
    fn coarsening_preserves_mass_and_distance_bound() {
        let g = unit_square(8);
        let w: Vec<f64> = (0..64).map(|i| (i % 7) as f64 + 1.0).collect();
        let m = EmpiricalMeasure::from_weights(g.clone(), w, 0).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        let c = m.coarsen_to(&g.coarsened(4).unwrap()).unwrap();
        assert!((c.total_mass() - 1.0).abs() < 1e-12);
        let u = EmpiricalMeasure::uniform(g);
        // coarsening never increases L¹ distance
        assert!(m.l1_distance(&u).unwrap() >= c.l1_distance(&u).unwrap() - 1e-15);
        assert!((c.l1_distance(&u).unwrap() - m.l1_distance(&u.coarsen_to(&c.grid).unwrap()).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip() {
        let m = EmpiricalMeasure::uniform(unit_square(4));
        let back = EmpiricalMeasure::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
    }
}
