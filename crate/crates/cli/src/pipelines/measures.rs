use serde::Serialize;
use srblab::random::{
    stationary_mc, stationary_ulam, ulam_matrix, zero_noise_limit, EmpiricalMeasure, Estimator, NoiseKernel, RandomSystem, ZERO_NOISE_MC,
};
use srblab::systems::default_start;

use super::{close_run, module, open_run, Outcome};
use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub(crate) struct StationarySummary {
    pub amplitude: f64,
    pub resolution: usize,
    pub ulam_residual: f64,
    pub ulam_iterations: usize,
    pub ulam_l1_to_uniform: f64,
    pub mc_l1_to_uniform: f64,
    pub ulam_mc_l1: f64,
}

/// Ulam and Monte Carlo stationary measures at one amplitude.
pub fn run_stationary(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sys = config.system_model()?;
    let g = &config.grid;
    let kernel = NoiseKernel::new(sys.dim(), config.noise.stationary).map_err(|e| CliError::config(e.to_string()))?;
    let rs = RandomSystem::translations(sys.clone());
    let mut run = open_run(config, "stationary")?;
    let seed = config.seed();
    let ulam = run.stage("ulam", |out| {
        let r = stationary_ulam(&rs, &kernel, g.resolution, g.mc_per_cell, seed).map_err(module)?;
        out.csv("stationary_ulam.csv", |w| r.measure.write_csv(w))?;
        Ok(r)
    })?;
    let mc = run.stage("monte_carlo", |out| {
        let m = stationary_mc(&rs, &kernel, &default_start(&sys, seed), g.mc_steps, g.burn_in, g.resolution, seed.wrapping_add(1))
            .map_err(module)?;
        out.csv("stationary_mc.csv", |w| m.write_csv(w))?;
        Ok(m)
    })?;
    let uniform = EmpiricalMeasure::uniform(ulam.measure.grid.clone());
    let summary = StationarySummary {
        amplitude: kernel.amplitude,
        resolution: g.resolution,
        ulam_residual: ulam.residual,
        ulam_iterations: ulam.iterations,
        ulam_l1_to_uniform: ulam.measure.l1_distance(&uniform).map_err(module)?,
        mc_l1_to_uniform: mc.l1_distance(&uniform).map_err(module)?,
        ulam_mc_l1: ulam.measure.l1_distance(&mc).map_err(module)?,
    };
    close_run(run, &summary, None)
}

#[derive(Debug, Clone, Serialize)]
pub(crate) struct ZeroNoiseSummary {
    pub amplitudes: Vec<f64>,
    pub residuals: Vec<Option<f64>>,
    pub consecutive: Vec<f64>,
    pub pairwise: Vec<Vec<f64>>,
    /// `∥μ_i P₀ − μ_i∥₁` and its sampling-error scale at every level.
    pub level_defects: Vec<f64>,
    pub level_bounds: Vec<f64>,
    pub invariance_defect: f64,
    pub grid_projection_bound: f64,
    pub defect_within_twice_bound: bool,
    /// Allowed increase of a consecutive distance.
    pub trend_slack: f64,
    /// No consecutive distance exceeds the previous one by more than the slack.
    pub trend_monotone: bool,
}

/// Stationary measures along the schedule, their distances, and how far
/// each is from invariance under the unperturbed map.
pub fn run_zero_noise(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sys = config.system_model()?;
    let g = &config.grid;
    let schedule = config.schedule(sys.dim())?;
    let rs = RandomSystem::translations(sys.clone());
    let estimator = match g.estimator {
        EstimatorKind::Ulam => Estimator::Ulam { mc_per_cell: g.mc_per_cell },
        EstimatorKind::MonteCarlo => Estimator::MonteCarlo { n_steps: g.mc_steps, burn_in: g.burn_in },
    };
    let seed = config.seed();
    let mut run = open_run(config, "zero-noise")?;
    let report = run.stage("schedule", |out| {
        let r = zero_noise_limit(&rs, &schedule, estimator, g.resolution, seed).map_err(module)?;
        for (i, m) in r.measures.iter().enumerate() {
            out.csv(&format!("measure_{i}.csv"), |w| m.write_csv(w))?;
        }
        Ok(r)
    })?;
    let (level_defects, level_bounds) = run.stage("defects", |_| {
        // the same unperturbed matrix the final defect is measured with
        let p0 = ulam_matrix(&sys, None, &report.measures[0].grid, ZERO_NOISE_MC, seed ^ 0x2e70).map_err(module)?;
        let mut pushed = vec![0.0; p0.len()];
        let mut defects = Vec::new();
        let mut bounds = Vec::new();
        for m in &report.measures {
            p0.left_mul(&m.weights, &mut pushed);
            defects.push(pushed.iter().zip(&m.weights).map(|(a, b)| (a - b).abs()).sum());
            bounds.push(p0.sampling_error(&m.weights));
        }
        Ok((defects, bounds))
    })?;
    // The same sampling-error scale, rescaled to the estimator's samples per
    // cell; a distance between two estimates fluctuates by about twice that.
    let cells = report.measures[0].grid.len() as f64;
    let per_cell = match estimator {
        Estimator::Ulam { mc_per_cell } => mc_per_cell as f64,
        Estimator::MonteCarlo { n_steps, burn_in } => (n_steps - burn_in) as f64 / cells,
    };
    let trend_slack = 2.0 * report.grid_projection_bound * (ZERO_NOISE_MC as f64 / per_cell).sqrt();
    let summary = ZeroNoiseSummary {
        amplitudes: report.amplitudes.clone(),
        residuals: report.residuals.clone(),
        consecutive: report.consecutive.clone(),
        pairwise: report.pairwise.clone(),
        level_defects,
        level_bounds,
        invariance_defect: report.invariance_defect,
        grid_projection_bound: report.grid_projection_bound,
        defect_within_twice_bound: report.invariance_defect < 2.0 * report.grid_projection_bound,
        trend_slack,
        trend_monotone: report.consecutive.windows(2).all(|w| w[1] <= w[0] + trend_slack),
    };
    close_run(run, &summary, None)
}
