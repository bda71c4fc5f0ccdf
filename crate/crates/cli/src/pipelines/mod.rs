//! Named experiments. Each writes its artifacts and a `summary.json` into
//! the run directory and returns the manifest.

mod basic;
mod gibbs;
mod measures;

use serde::Serialize;
use srblab::random::{sample_skew_orbit, NoiseKernel, RandomSystem};
use srblab::systems::{default_start, estimate_bundles, sample_orbit, BundleFrame, SmoothSystem, TRANSIENT};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::manifest::{RunDir, RunManifest};

pub use basic::{run_blocks, run_domination, run_lyapunov, run_pliss};
pub use gibbs::{run_disintegrate, run_gibbs_criterion, run_srb_report, Verdict};
pub use measures::{run_stationary, run_zero_noise};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: serde_json::Value,
    /// `Some(reason)` when the experiment ran but a hypothesis it checks is
    /// not met (exit status 3).
    pub unmet: Option<String>,
}

/// Module errors leave a stage untagged; [`RunDir::stage`] fills the name in.
pub(crate) fn module(source: srblab::Error) -> CliError {
    CliError::Stage { stage: String::new(), source }
}

pub(crate) fn open_run(config: &ExperimentConfig, pipeline: &str) -> Result<RunDir, CliError> {
    config.validate()?;
    let canonical = config.canonical();
    let hash = crate::manifest::sha256_hex(canonical.to_json().as_bytes());
    let mut run = RunDir::create(&config.out, pipeline, hash)?;
    run.stage("config", |out| out.write("config.toml", canonical.to_toml().as_bytes()))?;
    Ok(run)
}

pub(crate) fn close_run<T: Serialize>(mut run: RunDir, summary: &T, unmet: Option<String>) -> Result<Outcome, CliError> {
    let summary = serde_json::to_value(summary).expect("summary serializes");
    run.stage("summary", |out| out.json("summary.json", &summary))?;
    Ok(Outcome { manifest: run.finish()?, summary, unmet })
}

/// Bundle frame along a deterministic orbit of `n` usable points.
pub(crate) fn deterministic_frame(sys: &SmoothSystem, n: usize, seed: u64) -> Result<BundleFrame, CliError> {
    let orbit = sample_orbit(sys, &default_start(sys, seed), TRANSIENT, n + 2 * TRANSIENT, seed).map_err(module)?;
    estimate_bundles(sys, &sys.natural_splitting(), &orbit).map_err(module)
}

/// Bundle frame along a stationary random orbit of `n` usable points.
pub(crate) fn random_frame(rs: &RandomSystem, kernel: &NoiseKernel, n: usize, seed: u64) -> Result<BundleFrame, CliError> {
    let sys = rs.base();
    let total = TRANSIENT + n + 2 * TRANSIENT;
    let skew = sample_skew_orbit(rs, kernel, &default_start(sys, seed), total, seed).map_err(module)?;
    let segment = skew.segment.window(TRANSIENT, skew.len());
    estimate_bundles(rs, &sys.natural_splitting(), &segment).map_err(module)
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`). Results
/// do not depend on the count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| CliError::config(format!("cannot start {threads:?} worker threads: {e}")))?;
    Ok(pool.install(f))
}
