use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use srblab::pesin::{block_sample, find_ell, uniform_block_check, write_block_csv, BlockRow, EllSearch, PerturbedSample, PesinBlockParams};
use srblab::pliss::{random_trial, rho_threshold, verify_pliss_like, PlissParams};
use srblab::random::RandomSystem;
use srblab::systems::{
    bundle_exponents, certify_domination, default_start, lyapunov_spectrum, sample_orbit, BundleFrame, BundleSel, DominationEstimate,
    TRANSIENT,
};

use super::{close_run, deterministic_frame, module, open_run, random_frame, Outcome};
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
struct PlissSummary {
    params: PlissParams,
    rho: f64,
    trials: usize,
    length: usize,
    hypothesis_met: usize,
    conclusion_holds: usize,
    min_density_of_j: f64,
}

/// Random sequences satisfying the density lemma's hypotheses, each checked
/// for its conclusion; one CSV row per trial.
pub fn run_pliss(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = &config.pliss;
    let params = PlissParams::new(p.gamma1, p.gamma2, p.bound, p.epsilon).map_err(|e| CliError::config(format!("pliss: {e}")))?;
    let mut run = open_run(config, "pliss")?;
    let base = config.seed();
    let rows = run.stage("trials", |out| {
        let rows = (0..p.trials as u64)
            .into_par_iter()
            .map(|t| {
                let seed = base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t);
                let trial = random_trial(&params, p.length, seed)?;
                Ok((t, seed, verify_pliss_like(&trial.sequence, &trial.l, &params)?))
            })
            .collect::<srblab::Result<Vec<_>>>()
            .map_err(module)?;
        let mut csv = Vec::new();
        writeln!(csv, "trial,seed,density_l,hypothesis_met,density_j,conclusion_holds").unwrap();
        for (t, seed, r) in &rows {
            writeln!(csv, "{t},{seed},{:.6},{},{:.6},{}", r.density_of_l, r.hypothesis_met, r.density_of_j, r.conclusion_holds).unwrap();
        }
        out.write("pliss_trials.csv", &csv)?;
        Ok(rows)
    })?;
    let summary = PlissSummary {
        params,
        rho: rho_threshold(&params).map_err(module)?,
        trials: rows.len(),
        length: p.length,
        hypothesis_met: rows.iter().filter(|r| r.2.hypothesis_met).count(),
        conclusion_holds: rows.iter().filter(|r| r.2.conclusion_holds).count(),
        min_density_of_j: rows.iter().map(|r| r.2.density_of_j).fold(f64::INFINITY, f64::min),
    };
    let unmet = (summary.hypothesis_met < summary.trials).then(|| "some trials did not meet the density hypothesis".to_string());
    close_run(run, &summary, unmet)
}

#[derive(Debug, Clone, Serialize)]
struct LyapunovSummary {
    system: String,
    steps: usize,
    per_seed: Vec<(u64, Vec<f64>)>,
    mean: Vec<f64>,
    /// Max − min over seeds, per exponent; wide spreads hint at several
    /// ergodic components.
    spread: Vec<f64>,
}

pub(crate) fn exponents_over_seeds(config: &ExperimentConfig) -> Result<Vec<(u64, Vec<f64>)>, CliError> {
    let sys = config.system_model()?;
    config
        .seeds
        .iter()
        .map(|&s| lyapunov_spectrum(&sys, &default_start(&sys, s), config.orbit.steps, s).map(|e| (s, e)).map_err(module))
        .collect()
}

pub(crate) fn mean_and_spread(per_seed: &[(u64, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    let d = per_seed[0].1.len();
    let n = per_seed.len() as f64;
    let mean = (0..d).map(|i| per_seed.iter().map(|(_, e)| e[i]).sum::<f64>() / n).collect();
    let spread = (0..d)
        .map(|i| {
            let (lo, hi) = per_seed.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, (_, e)| (a.0.min(e[i]), a.1.max(e[i])));
            hi - lo
        })
        .collect();
    (mean, spread)
}

pub fn run_lyapunov(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sys = config.system_model()?;
    let mut run = open_run(config, "lyapunov")?;
    let per_seed = run.stage("exponents", |out| {
        let per_seed = exponents_over_seeds(config)?;
        out.json("exponents.json", &per_seed)?;
        Ok(per_seed)
    })?;
    if config.orbit.export > 0 {
        run.stage("orbit", |out| {
            let orbit = sample_orbit(&sys, &default_start(&sys, config.seed()), TRANSIENT, config.orbit.export, config.seed()).map_err(module)?;
            out.csv("orbit.csv", |w| orbit.write_csv(w))
        })?;
    }
    let (mean, spread) = mean_and_spread(&per_seed);
    let summary = LyapunovSummary { system: config.system.clone(), steps: config.orbit.steps, per_seed, mean, spread };
    close_run(run, &summary, None)
}

#[derive(Debug, Clone, Serialize)]
struct DominationSummary {
    system: String,
    e_bundles: Vec<usize>,
    f_bundle: usize,
    frame_invariance_error: f64,
    estimate: DominationEstimate,
}

/// `(C, λ)` for `E = bundles before split`, `F = bundle split`. A refuted
/// domination is a hypothesis failure (exit status 3).
pub fn run_domination(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sys = config.system_model()?;
    let k = config.domination.split;
    if k == 0 {
        return Err(CliError::config("domination.split must be at least 1"));
    }
    let mut run = open_run(config, "domination")?;
    let summary = run.stage("certify", |out| {
        let frame = deterministic_frame(&sys, config.orbit.frame, config.seed())?;
        let estimate =
            certify_domination(&sys, &frame, BundleSel::new(0, k), BundleSel::single(k), config.domination.n_max).map_err(module)?;
        let s = DominationSummary {
            system: config.system.clone(),
            e_bundles: (0..k).collect(),
            f_bundle: k,
            frame_invariance_error: frame.invariance_error(&sys),
            estimate,
        };
        out.json("domination.json", &s)?;
        Ok(s)
    })?;
    close_run(run, &summary, None)
}

/// Exponent floor and uniform block mass of one level bundle across the
/// noise schedule.
#[derive(Debug, Clone, Serialize)]
pub(crate) struct LevelHypotheses {
    pub level: usize,
    pub alpha: f64,
    /// Exponents of the level bundle at each amplitude.
    pub exponents: Vec<(f64, Vec<f64>)>,
    pub exponent_floor_holds: bool,
    /// Largest `ℓ` that `find_ell` needed at any amplitude.
    pub ell: Option<usize>,
    pub searches: Vec<(f64, EllSearch)>,
    pub block_rows: Vec<BlockRow>,
    pub block_mass_holds: bool,
    pub note: Option<String>,
}

impl LevelHypotheses {
    pub fn holds(&self) -> bool {
        self.exponent_floor_holds && self.block_mass_holds
    }
}

/// Frames along random orbits at every amplitude of the schedule.
pub(crate) fn schedule_frames(config: &ExperimentConfig) -> Result<(RandomSystem, Vec<(f64, BundleFrame)>), CliError> {
    let sys = config.system_model()?;
    let rs = RandomSystem::translations(sys.clone());
    let frames = config
        .schedule(sys.dim())?
        .iter()
        .enumerate()
        .map(|(i, k)| Ok((k.amplitude, random_frame(&rs, k, config.block.frame, config.seed().wrapping_add(i as u64))?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((rs, frames))
}

pub(crate) fn level_hypotheses(
    config: &ExperimentConfig,
    rs: &RandomSystem,
    frames: &[(f64, BundleFrame)],
) -> Result<Vec<LevelHypotheses>, CliError> {
    let b = &config.block;
    let spec = rs.base().natural_splitting();
    let mut out = Vec::new();
    for level in 0..config.gibbs.levels {
        let sel = BundleSel::through_center(level);
        let mut h = LevelHypotheses {
            level,
            alpha: b.alpha,
            exponents: Vec::new(),
            exponent_floor_holds: false,
            ell: None,
            searches: Vec::new(),
            block_rows: Vec::new(),
            block_mass_holds: false,
            note: None,
        };
        if sel.check(&spec).is_err() || spec.dim_of(sel) == 0 {
            h.note = Some("the level bundle is trivial or absent".into());
            out.push(h);
            continue;
        }
        for (amp, frame) in frames {
            h.exponents.push((*amp, bundle_exponents(rs, frame, sel).map_err(module)?));
        }
        h.exponent_floor_holds = h.exponents.iter().all(|(_, e)| e.iter().all(|&l| l > b.alpha));
        if !h.exponent_floor_holds {
            h.note = Some(format!("an exponent of the level bundle is not above α = {}", b.alpha));
            out.push(h);
            continue;
        }
        let reach = PesinBlockParams::with_depth(b.ell_max, b.alpha, 1).map_err(module)?;
        let mut ell = 0;
        for (amp, frame) in frames {
            let sample = block_sample(frame, &reach, b.sample);
            let search = find_ell(rs, frame, &sample, b.mass_epsilon, b.alpha, sel, b.ell_max).map_err(module)?;
            match search {
                EllSearch::Found { ell: e, .. } => ell = ell.max(e),
                EllSearch::NotFound { .. } => {
                    h.note = Some(format!("no ℓ ≤ {} reaches block mass {} at amplitude {amp}", b.ell_max, 1.0 - b.mass_epsilon));
                }
            }
            h.searches.push((*amp, search));
        }
        if h.note.is_none() {
            let params = PesinBlockParams::with_depth(ell, b.alpha, 1).map_err(module)?;
            let runs: Vec<_> = frames
                .iter()
                .map(|(amp, frame)| PerturbedSample { noise_level: *amp, family: rs, frame, sample: block_sample(frame, &reach, b.sample) })
                .collect();
            h.block_rows = uniform_block_check(&runs, &params, sel).map_err(module)?;
            h.block_mass_holds = h.block_rows.iter().all(|r| r.member_fraction >= 1.0 - b.mass_epsilon);
            h.ell = Some(ell);
        }
        out.push(h);
    }
    Ok(out)
}

/// Block masses of every level bundle along the noise schedule.
pub fn run_blocks(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut run = open_run(config, "blocks")?;
    let (rs, frames) = run.stage("frames", |_| schedule_frames(config))?;
    let hyps = run.stage("blocks", |out| {
        let hyps = level_hypotheses(config, &rs, &frames)?;
        let rows: Vec<BlockRow> = hyps.iter().flat_map(|h| h.block_rows.iter().cloned()).collect();
        out.csv("blocks.csv", |w| write_block_csv(&rows, w))?;
        out.json("blocks.json", &hyps)?;
        Ok(hyps)
    })?;
    let unmet = hyps.iter().find(|h| !h.holds()).map(|h| {
        format!("level {}: {}", h.level, h.note.clone().unwrap_or_else(|| "block mass below target".into()))
    });
    close_run(run, &hyps, unmet)
}
