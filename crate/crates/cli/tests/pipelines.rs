//! Each pipeline on a reduced config: artifacts, summaries, reproducibility.

use std::path::Path;

use srblab_cli::{run_pipeline, ExperimentConfig, RunManifest, PIPELINES};

fn quick(system: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(system).unwrap();
    c.out = out.to_path_buf();
    c.orbit.steps = 10_000;
    c.orbit.frame = 3_000;
    c.orbit.export = 50;
    c.pliss.trials = 20;
    c.pliss.length = 500;
    c.grid.resolution = 16;
    c.grid.mc_per_cell = 64;
    c.grid.mc_steps = 100_000;
    c.noise.schedule = vec![0.05, 0.025];
    c.block.frame = 2_000;
    c.block.sample = 200;
    c.fbox.samples = 200_000;
    c.fbox.base_index = Some(1000);
    c.gibbs.frame = 6_000;
    c.gibbs.samples = 100_000;
    c.entropy.points = 100_000;
    c.entropy.n_max = 30;
    c
}

#[test]
fn every_pipeline_writes_a_manifest_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    for name in PIPELINES {
        let c = quick("solenoid", &tmp.path().join(name));
        let o = run_pipeline(name, &c).unwrap_or_else(|e| panic!("{name}: {e}"));
        let on_disk = RunManifest::read(&c.out).unwrap();
        assert_eq!(on_disk, o.manifest);
        assert_eq!(o.manifest.pipeline, name);
        assert_eq!(o.manifest.stages[0].name, "config");
        assert_eq!(o.manifest.stages.last().unwrap().name, "summary");
        for stage in &o.manifest.stages {
            for f in &stage.outputs {
                let bytes = std::fs::read(c.out.join(&f.file)).unwrap();
                assert_eq!(srblab_cli::manifest::sha256_hex(&bytes), f.sha256, "{name}/{}", f.file);
            }
        }
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(c.out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, o.summary);
    }
}

#[test]
fn identical_configs_reproduce_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, system) in [("stationary", "cat_map"), ("lyapunov", "solenoid"), ("disintegrate", "solenoid")] {
        let a = run_pipeline(name, &quick(system, &tmp.path().join(format!("{name}-a")))).unwrap();
        let b = srblab_cli::with_threads(Some(2), || run_pipeline(name, &quick(system, &tmp.path().join(format!("{name}-b"))))).unwrap().unwrap();
        assert_eq!(a.manifest.checksums(), b.manifest.checksums(), "{name}");
    }
    let mut other = quick("cat_map", &tmp.path().join("c"));
    other.seeds = vec![2];
    let c = run_pipeline("stationary", &other).unwrap();
    let a = RunManifest::read(&tmp.path().join("stationary-a")).unwrap();
    assert_ne!(c.manifest.config_hash, a.config_hash);
    assert_ne!(c.manifest.checksums()["ulam/stationary_ulam.csv"], a.checksums()["ulam/stationary_ulam.csv"]);
}

#[test]
fn single_trial_pliss_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick("cat_map", tmp.path());
    c.pliss.trials = 1;
    let o = run_pipeline("pliss", &c).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("pliss_trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(o.summary["conclusion_holds"], 1);
}

#[test]
fn one_level_schedule_gives_one_measure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick("cat_map", tmp.path());
    c.noise.schedule = vec![0.05];
    let o = run_pipeline("zero-noise", &c).unwrap();
    assert_eq!(o.summary["amplitudes"].as_array().unwrap().len(), 1);
    assert!(o.summary["consecutive"].as_array().unwrap().is_empty());
    assert!(tmp.path().join("measure_0.csv").exists());
    assert!(!tmp.path().join("measure_1.csv").exists());
}

#[test]
fn monte_carlo_estimator_is_selectable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick("cat_map", tmp.path());
    c.grid.estimator = srblab_cli::config::EstimatorKind::MonteCarlo;
    let o = run_pipeline("zero-noise", &c).unwrap();
    assert!(o.summary["residuals"].as_array().unwrap().iter().all(|r| r.is_null()));
}

#[test]
fn contraction_report_is_vacuous() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_pipeline("srb-report", &quick("contraction", tmp.path())).unwrap();
    assert_eq!(o.summary["verdict"], "entropy-formula holds vacuously, not SRB (zero entropy)");
    assert!(o.unmet.is_none());
}

#[test]
fn lyapunov_exports_orbit_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick("cat_map", tmp.path());
    c.seeds = vec![5, 6];
    let o = run_pipeline("lyapunov", &c).unwrap();
    assert_eq!(o.summary["per_seed"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(tmp.path().join("orbit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    // a hyperbolic automorphism has exponents independent of the seed
    assert!(o.summary["spread"][0].as_f64().unwrap() < 1e-6);
}
