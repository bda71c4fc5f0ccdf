use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_kernel, EmpiricalMeasure, Grid, NoiseKernel, RandomSystem};
use crate::error::{Error, Result};
use crate::systems::{check_start, MapFamily, Point, ESCAPE_MARGIN};

/// Target `∥μP − μ∥₁` for the power iteration.
pub const POWER_TOL: f64 = 1e-10;
const POWER_CAP: usize = 100_000;

/// Samples per cell for the zero-noise transfer matrix used to measure
/// invariance defects.
pub const ZERO_NOISE_MC: usize = 1024;

/// Row-stochastic sparse matrix in compressed-row form; entries are
/// `count / samples_per_row`, so every row sums to one up to rounding of a
/// single division.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseStochastic {
    pub samples_per_row: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    counts: Vec<u32>,
}

impl SparseStochastic {
    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(column, probability)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let m = self.samples_per_row as f64;
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k] as usize, self.counts[k] as f64 / m))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, p)| p).sum()
    }

    /// `out = μ P`.
    pub fn left_mul(&self, mu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let m = self.samples_per_row as f64;
        for (i, &w) in mu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let s = w / m;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.cols[k] as usize] += s * self.counts[k] as f64;
            }
        }
    }

    /// Expected L¹ size of the Monte Carlo error of `μP`, treating each row
    /// as a multinomial sample: `√(2/π) Σ_j √(Σ_i μ_i² P_ij(1−P_ij)/m)`.
    pub fn sampling_error(&self, mu: &[f64]) -> f64 {
        let m = self.samples_per_row as f64;
        let mut var = vec![0.0; self.len()];
        for (i, &w) in mu.iter().enumerate() {
            for (j, p) in self.row(i) {
                var[j] += w * w * p * (1.0 - p) / m;
            }
        }
        (2.0 / std::f64::consts::PI).sqrt() * var.iter().map(|v| v.sqrt()).sum::<f64>()
    }
}

/// Cell-to-cell transition matrix of `family` under `kernel` (or the
/// deterministic map when `kernel` is `None` or has zero amplitude).
///
/// Each row is estimated from a stratified sample of the product of the
/// cell and the noise cube: `k` jittered strata per axis with
/// `k = ⌈mc^{1/(d+m)}⌉`, drawn from a random stream owned by the cell, so the
/// matrix does not depend on the thread count.
pub fn ulam_matrix<F: MapFamily + ?Sized>(
    family: &F,
    kernel: Option<&NoiseKernel>,
    grid: &Grid,
    mc_per_cell: usize,
    seed: u64,
) -> Result<SparseStochastic> {
    let d = grid.dim();
    let kernel = kernel.filter(|k| k.amplitude > 0.0);
    let m = kernel.map_or(0, |k| k.dim);
    let strata = (mc_per_cell as f64).powf(1.0 / (d + m) as f64).ceil() as usize;
    let strata = strata.max(1);
    // guard against rounding in the root
    let strata = if strata > 1 && (strata - 1).pow((d + m) as u32) >= mc_per_cell { strata - 1 } else { strata };
    let samples = strata.pow((d + m) as u32);
    let widths: Vec<f64> = (0..d).map(|i| grid.cell_width(i)).collect();

    let rows: Vec<Result<Vec<(u32, u32)>>> = (0..grid.len())
        .into_par_iter()
        .map(|cell| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cell as u64);
            let lower = grid.cell_lower(cell);
            let mut hits: Vec<u32> = Vec::with_capacity(samples);
            let mut idx = vec![0usize; d + m];
            for _ in 0..samples {
                let mut x = lower.clone();
                for i in 0..d {
                    x[i] += (idx[i] as f64 + rng.gen::<f64>()) / strata as f64 * widths[i];
                }
                let omega = kernel.map(|k| {
                    Point::from_iterator(m, (0..m).map(|j| k.amplitude * (2.0 * (idx[d + j] as f64 + rng.gen::<f64>()) / strata as f64 - 1.0)))
                });
                let y = family.step(omega.as_ref(), &x);
                let target = grid.cell_of(&y).ok_or_else(|| Error::Escape {
                    step: 0,
                    detail: format!("image {:?} of cell {cell} leaves the grid", y.as_slice()),
                })?;
                hits.push(target as u32);
                // odometer over strata
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot < strata {
                        break;
                    }
                    *slot = 0;
                }
            }
            hits.sort_unstable();
            let mut row: Vec<(u32, u32)> = Vec::new();
            for h in hits {
                match row.last_mut() {
                    Some((c, n)) if *c == h => *n += 1,
                    _ => row.push((h, 1)),
                }
            }
            Ok(row)
        })
        .collect();

    let mut row_ptr = Vec::with_capacity(grid.len() + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut counts = Vec::new();
    for r in rows {
        for (c, n) in r? {
            cols.push(c);
            counts.push(n);
        }
        row_ptr.push(cols.len());
    }
    Ok(SparseStochastic { samples_per_row: samples, row_ptr, cols, counts })
}

/// Output of [`stationary_ulam`].
#[derive(Debug, Clone)]
pub struct UlamResult {
    pub measure: EmpiricalMeasure,
    pub residual: f64,
    pub iterations: usize,
    pub matrix: SparseStochastic,
}

/// Stationary measure of the random system on a grid with `resolution`
/// cells per axis: left fixed vector of the Ulam matrix by power iteration
/// from the uniform vector.
pub fn stationary_ulam(rs: &RandomSystem, kernel: &NoiseKernel, resolution: usize, mc_per_cell: usize, seed: u64) -> Result<UlamResult> {
    if resolution < 8 {
        return Err(Error::invalid(format!("Ulam resolution must be at least 8 per axis, got {resolution}")));
    }
    if mc_per_cell < 16 {
        return Err(Error::invalid(format!("at least 16 samples per cell are required, got {mc_per_cell}")));
    }
    check_kernel(rs, kernel)?;
    let grid = Grid::uniform(rs.base().attractor_box().clone(), resolution)?;
    let matrix = ulam_matrix(rs, Some(kernel), &grid, mc_per_cell, seed)?;
    let (weights, residual, iterations) = power_iteration(&matrix)?;
    let measure = EmpiricalMeasure::from_weights(grid, weights, (matrix.len() * matrix.samples_per_row) as u64)?;
    Ok(UlamResult { measure, residual, iterations, matrix })
}

fn power_iteration(p: &SparseStochastic) -> Result<(Vec<f64>, f64, usize)> {
    let n = p.len();
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    for it in 0..POWER_CAP {
        p.left_mul(&mu, &mut next);
        // renormalise against drift from rounding
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let residual: f64 = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum();
        if residual < POWER_TOL {
            return Ok((mu, residual, it + 1));
        }
        history.push(residual);
        std::mem::swap(&mut mu, &mut next);
    }
    let k = history.len();
    let rate = (history[k - 1] / history[k - 1001]).powf(1.0 / 1000.0);
    Err(Error::NonConvergence {
        iterations: POWER_CAP,
        detail: format!(
            "residual {:.3e} after {POWER_CAP} iterations; observed contraction {rate:.6} per step suggests a spectral gap of about {:.2e}",
            history[k - 1],
            1.0 - rate
        ),
    })
}

/// Histogram of one random orbit after `burn_in` of its `n_steps` steps.
pub fn stationary_mc(
    rs: &RandomSystem,
    kernel: &NoiseKernel,
    x0: &Point,
    n_steps: usize,
    burn_in: usize,
    resolution: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    if burn_in >= n_steps {
        return Err(Error::invalid(format!("burn-in {burn_in} must be smaller than the {n_steps} steps")));
    }
    check_kernel(rs, kernel)?;
    let sys = rs.base();
    check_start(sys, x0)?;
    let grid = Grid::uniform(sys.attractor_box().clone(), resolution)?;
    let escape = sys.attractor_box().enlarged(ESCAPE_MARGIN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0.0f64; grid.len()];
    let mut x = x0.clone();
    for step in 0..n_steps {
        let w = kernel.sample(&mut rng);
        x = rs.step(Some(&w), &x);
        sys.dither(&mut x, &mut rng);
        if !escape.contains(&x) {
            return Err(Error::Escape { step, detail: format!("orbit reached {:?}", x.as_slice()) });
        }
        if step >= burn_in {
            let c = grid.cell_of(&x).ok_or_else(|| Error::Escape {
                step,
                detail: format!("orbit point {:?} is outside the histogram box", x.as_slice()),
            })?;
            counts[c] += 1.0;
        }
    }
    EmpiricalMeasure::from_weights(grid, counts, (n_steps - burn_in) as u64)
}

/// Which stationary-measure estimator a zero-noise sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Ulam { mc_per_cell: usize },
    MonteCarlo { n_steps: usize, burn_in: usize },
}

/// Stationary measures along a noise schedule and how close the last one is
/// to being invariant for the unperturbed map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroNoiseReport {
    pub amplitudes: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    /// Power-iteration residuals (Ulam estimator only).
    pub residuals: Vec<Option<f64>>,
    /// `L¹(μ_i, μ_{i+1})`.
    pub consecutive: Vec<f64>,
    /// `L¹(μ_i, μ_j)` for all pairs.
    pub pairwise: Vec<Vec<f64>>,
    /// `∥μ P₀ − μ∥₁` for the last measure, `P₀` the zero-noise Ulam matrix.
    pub invariance_defect: f64,
    /// Expected size of the part of the defect caused by estimating `P₀` from
    /// finitely many samples per cell.
    pub grid_projection_bound: f64,
}

pub fn zero_noise_limit(
    rs: &RandomSystem,
    schedule: &[NoiseKernel],
    estimator: Estimator,
    resolution: usize,
    seed: u64,
) -> Result<ZeroNoiseReport> {
    if schedule.is_empty() {
        return Err(Error::invalid("noise schedule is empty"));
    }
    for w in schedule.windows(2) {
        if !(w[1].amplitude < w[0].amplitude) || !w[1].is_nested_in(&w[0]) {
            return Err(Error::invalid("noise schedule must be strictly decreasing and nested"));
        }
    }
    let sys = rs.base();
    let mut measures = Vec::with_capacity(schedule.len());
    let mut residuals = Vec::with_capacity(schedule.len());
    for (level, kernel) in schedule.iter().enumerate() {
        let level_seed = seed.wrapping_add(level as u64);
        match estimator {
            Estimator::Ulam { mc_per_cell } => {
                let r = stationary_ulam(rs, kernel, resolution, mc_per_cell, level_seed)?;
                residuals.push(Some(r.residual));
                measures.push(r.measure);
            }
            Estimator::MonteCarlo { n_steps, burn_in } => {
                let x0 = crate::systems::default_start(sys, level_seed);
                measures.push(stationary_mc(rs, kernel, &x0, n_steps, burn_in, resolution, level_seed)?);
                residuals.push(None);
            }
        }
    }
    let n = measures.len();
    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = measures[i].l1_distance(&measures[j])?;
            pairwise[i][j] = d;
            pairwise[j][i] = d;
        }
    }
    let consecutive = (0..n.saturating_sub(1)).map(|i| pairwise[i][i + 1]).collect();
    let last = &measures[n - 1];
    let p0 = ulam_matrix(sys, None, &last.grid, ZERO_NOISE_MC, seed ^ 0x2e70)?;
    let mut pushed = vec![0.0; last.weights.len()];
    p0.left_mul(&last.weights, &mut pushed);
    let invariance_defect = pushed.iter().zip(&last.weights).map(|(a, b)| (a - b).abs()).sum();
    let grid_projection_bound = p0.sampling_error(&last.weights);
    Ok(ZeroNoiseReport {
        amplitudes: schedule.iter().map(|k| k.amplitude).collect(),
        measures,
        residuals,
        consecutive,
        pairwise,
        invariance_defect,
        grid_projection_bound,
    })
}
