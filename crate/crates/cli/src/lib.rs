//! Experiment pipelines over `srblab`: configuration, run directories with
//! checksummed manifests, and the `srblab` command-line front end.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipelines;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use manifest::RunManifest;
pub use pipelines::{with_threads, Outcome, Verdict};

/// Pipeline names as they appear on the command line.
pub const PIPELINES: [&str; 9] =
    ["pliss", "lyapunov", "domination", "blocks", "stationary", "zero-noise", "disintegrate", "gibbs-criterion", "srb-report"];

/// Runs the named pipeline.
pub fn run_pipeline(name: &str, config: &ExperimentConfig) -> Result<Outcome, CliError> {
    use pipelines::*;
    match name {
        "pliss" => run_pliss(config),
        "lyapunov" => run_lyapunov(config),
        "domination" => run_domination(config),
        "blocks" => run_blocks(config),
        "stationary" => run_stationary(config),
        "zero-noise" => run_zero_noise(config),
        "disintegrate" => run_disintegrate(config),
        "gibbs-criterion" => run_gibbs_criterion(config),
        "srb-report" => run_srb_report(config),
        other => Err(CliError::Config(format!("unknown pipeline `{other}`"))),
    }
}
