use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmpiricalMeasure, Grid, SkewOrbit};
use crate::error::{Error, Result};

const MIN_SAMPLES: usize = 1000;
/// Cells per axis of the state partition used by the independence test.
const STATE_BINS: usize = 4;

/// Empirical check that a stationary skew-orbit projects to `ν^ℕ × μ`: the
/// state marginal matches `μ` and the outgoing noise is independent of the
/// current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub samples: usize,
    /// L¹ distance between the orbit histogram and the reference measure.
    pub marginal_l1: f64,
    /// `(χ² − dof)/√(2·dof)` for state cell × noise orthant.
    pub independence_z: f64,
    /// The same statistic after shuffling the noise against the states.
    pub control_z: f64,
    pub dof: usize,
    pub independent: bool,
}

impl LiftReport {
    pub fn marginal_matches(&self, tol: f64) -> bool {
        self.marginal_l1 < tol
    }
}

pub fn lift_check(orbit: &SkewOrbit, measure: &EmpiricalMeasure) -> Result<LiftReport> {
    let n = orbit.len().saturating_sub(1);
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSample(format!("lift check needs {MIN_SAMPLES} steps, got {n}")));
    }
    let states = &orbit.segment.points[..n];
    let noise = &orbit.noise()[..n];
    let marginal = EmpiricalMeasure::from_points(measure.grid.clone(), states.iter())?;
    let marginal_l1 = marginal.l1_distance(measure)?;

    let coarse = Grid::new(measure.grid.region.clone(), vec![STATE_BINS; measure.grid.dim()])?;
    let rows: Vec<usize> = states.iter().map(|p| coarse.cell_of(p).unwrap_or(0)).collect();
    let cols: Vec<usize> = noise
        .iter()
        .map(|w| w.iter().enumerate().fold(0usize, |acc, (i, v)| acc | (usize::from(*v > 0.0) << i)))
        .collect();
    let n_cols = 1usize << noise.first().map_or(0, |w| w.len());
    let (independence_z, dof) = chi_square_z(&rows, &cols, coarse.len(), n_cols);

    let mut shuffled = cols.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(0x005e_ed0f));
    let (control_z, _) = chi_square_z(&rows, &shuffled, coarse.len(), n_cols);

    Ok(LiftReport { samples: n, marginal_l1, independence_z, control_z, dof, independent: independence_z < 3.0 })
}

/// Normalised chi-square statistic of a contingency table; rows or columns
/// without observations do not count towards the degrees of freedom. A table
/// with a single occupied row or column is trivially independent.
fn chi_square_z(rows: &[usize], cols: &[usize], n_rows: usize, n_cols: usize) -> (f64, usize) {
    let mut table = vec![0.0f64; n_rows * n_cols];
    for (r, c) in rows.iter().zip(cols) {
        table[r * n_cols + c] += 1.0;
    }
    let row_tot: Vec<f64> = (0..n_rows).map(|r| table[r * n_cols..(r + 1) * n_cols].iter().sum()).collect();
    let col_tot: Vec<f64> = (0..n_cols).map(|c| (0..n_rows).map(|r| table[r * n_cols + c]).sum()).collect();
    let total: f64 = row_tot.iter().sum();
    let live_rows = row_tot.iter().filter(|v| **v > 0.0).count();
    let live_cols = col_tot.iter().filter(|v| **v > 0.0).count();
    if live_rows < 2 || live_cols < 2 {
        return (0.0, 0);
    }
    let mut chi2 = 0.0;
    for r in 0..n_rows {
        for c in 0..n_cols {
            let e = row_tot[r] * col_tot[c] / total;
            if e > 0.0 {
                let o = table[r * n_cols + c];
                chi2 += (o - e) * (o - e) / e;
            }
        }
    }
    let dof = (live_rows - 1) * (live_cols - 1);
    ((chi2 - dof as f64) / (2.0 * dof as f64).sqrt(), dof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{sample_skew_orbit, NoiseKernel, RandomSystem};
    use crate::systems::{builtin_system, default_start, Point};

    #[test]
    fn cat_noise_is_independent_of_state() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let orbit = sample_skew_orbit(&rs, &k, &default_start(&sys, 1), 100_000, 4).unwrap();
        let uniform = EmpiricalMeasure::uniform(Grid::uniform(sys.attractor_box().clone(), 8).unwrap());
        let r = lift_check(&orbit, &uniform).unwrap();
        assert!(r.independent, "{r:?}");
        assert!(r.control_z.abs() < 4.0);
        assert!(r.marginal_matches(0.05), "{r:?}");
    }

    #[test]
    fn state_dependent_noise_is_detected() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let mut orbit = sample_skew_orbit(&rs, &k, &default_start(&sys, 1), 20_000, 4).unwrap();
        // negative control: make the noise sign follow the state
        let pts = orbit.segment.points.clone();
        for (w, p) in orbit.segment.noise.as_mut().unwrap().iter_mut().zip(&pts) {
            *w = Point::from_vec(vec![if p[0] < 0.5 { -0.01 } else { 0.01 }, 0.0]);
        }
        let uniform = EmpiricalMeasure::uniform(Grid::uniform(sys.attractor_box().clone(), 8).unwrap());
        assert!(!lift_check(&orbit, &uniform).unwrap().independent);
    }

    #[test]
    fn mismatched_measure_is_flagged() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.05).unwrap();
        let orbit = sample_skew_orbit(&rs, &k, &default_start(&sys, 1), 20_000, 4).unwrap();
        let grid = Grid::uniform(sys.attractor_box().clone(), 8).unwrap();
        let mut w = vec![0.0; grid.len()];
        w[0] = 1.0;
        let point_mass = EmpiricalMeasure::from_weights(grid, w, 1).unwrap();
        assert!(!lift_check(&orbit, &point_mass).unwrap().marginal_matches(0.05));
    }

    #[test]
    fn zero_noise_trivially_independent() {
        let sys = builtin_system("cat_map").unwrap();
        let rs = RandomSystem::translations(sys.clone());
        let k = NoiseKernel::new(2, 0.0).unwrap();
        let orbit = sample_skew_orbit(&rs, &k, &default_start(&sys, 1), 5_000, 4).unwrap();
        let uniform = EmpiricalMeasure::uniform(Grid::uniform(sys.attractor_box().clone(), 8).unwrap());
        let r = lift_check(&orbit, &uniform).unwrap();
        assert_eq!(r.independence_z, 0.0);
        assert!(r.independent);
    }
}
