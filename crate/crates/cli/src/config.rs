//! Experiment configuration. A config file (TOML, or JSON when the name ends
//! in `.json`) only needs the keys it changes: it is merged over the
//! embedded defaults of the system it names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use srblab::gibbs::{HolderBudget, LevelSpec};
use srblab::pesin::PesinBlockParams;
use srblab::random::NoiseKernel;
use srblab::systems::{builtin_system, SmoothSystem, BUILTIN_NAMES};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    /// The first seed drives every single-run stage; all of them are used
    /// where per-seed spreads are reported.
    pub seeds: Vec<u64>,
    /// Not part of the experiment: left out of the copy written to the run
    /// directory and of the config hash.
    #[serde(default, skip_serializing_if = "is_empty_path")]
    pub out: PathBuf,
    pub parameters: BTreeMap<String, f64>,
    pub orbit: OrbitConfig,
    pub pliss: PlissConfig,
    pub domination: DominationConfig,
    pub noise: NoiseConfig,
    pub grid: GridConfig,
    pub block: BlockConfig,
    #[serde(rename = "box")]
    pub fbox: BoxConfig,
    pub gibbs: GibbsConfig,
    pub entropy: EntropyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitConfig {
    /// Iterates averaged for Lyapunov exponents.
    pub steps: usize,
    /// Length of the recorded orbit carrying bundle frames.
    pub frame: usize,
    /// Orbit points written to `orbit.csv` by `lyapunov` (0: none).
    pub export: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlissConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "C")]
    pub bound: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominationConfig {
    /// `E` is made of the bundles before `split`, `F` is bundle `split`.
    pub split: usize,
    pub n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Translation amplitudes, strictly decreasing.
    pub schedule: Vec<f64>,
    /// Amplitude of the single `stationary` run.
    pub stationary: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ulam,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: usize,
    pub estimator: EstimatorKind,
    pub mc_per_cell: usize,
    pub mc_steps: usize,
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub ell: usize,
    pub alpha: f64,
    pub depth: usize,
    /// Block mass must reach `1 − mass_epsilon`.
    pub mass_epsilon: f64,
    pub ell_max: usize,
    /// Frame points tested per noise level.
    pub sample: usize,
    /// Orbit length per noise level.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub delta: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<HolderBudget>,
    pub chain_keep: usize,
    /// Orbit points binned by `disintegrate`.
    pub samples: usize,
    pub min_hits: u64,
    /// Truncation tail bound for the density-ratio products.
    pub tail: f64,
    /// Allowed relative deviation of observed from predicted ratios.
    pub ratio_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub levels: usize,
    pub frame: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    pub cells: usize,
    pub points: usize,
    pub n_max: usize,
    pub tolerance: f64,
}

impl ExperimentConfig {
    /// Embedded defaults for a roster system.
    pub fn defaults(system: &str) -> Result<Self, CliError> {
        let sys = builtin_system(system).map_err(|e| CliError::config(e.to_string()))?;
        let schedule: Vec<f64> = (0..7).map(|i| 0.0625 * 0.5f64.powi(i)).collect();
        let mut c = ExperimentConfig {
            system: system.to_string(),
            seeds: vec![1],
            out: PathBuf::from("runs").join(system),
            parameters: BTreeMap::new(),
            orbit: OrbitConfig { steps: 100_000, frame: 20_000, export: 0 },
            pliss: PlissConfig { gamma1: -1.0, gamma2: -0.5, bound: 2.0, epsilon: 0.1, trials: 1000, length: 10_000 },
            domination: DominationConfig { split: 1, n_max: 40 },
            noise: NoiseConfig { schedule, stationary: 0.05 },
            grid: GridConfig {
                resolution: 32,
                estimator: EstimatorKind::Ulam,
                mc_per_cell: 1024,
                mc_steps: 10_000_000,
                burn_in: 1000,
            },
            block: BlockConfig { ell: 1, alpha: 0.5, depth: 10, mass_epsilon: 0.05, ell_max: 10, sample: 2000, frame: 20_000 },
            fbox: BoxConfig {
                delta: 0.2,
                beta: 0.04,
                separation: None,
                tolerance: None,
                base_index: None,
                budget: None,
                chain_keep: 40,
                samples: 2_000_000,
                min_hits: 100,
                tail: 1e-3,
                ratio_tolerance: 0.1,
            },
            gibbs: GibbsConfig { levels: 1, frame: 20_000, samples: 2_000_000 },
            entropy: EntropyConfig { cells: 2, points: 4_000_000, n_max: 60, tolerance: 0.1 },
        };
        match sys.kind() {
            srblab::systems::SystemKind::CatMap => {}
            srblab::systems::SystemKind::Solenoid { .. } => {
                c.grid.mc_per_cell = 256;
                c.block.alpha = 0.5 * 2f64.ln();
                c.block.depth = 20;
                c.fbox.delta = 0.24;
                c.fbox.beta = 0.05;
                c.fbox.base_index = Some(1000);
                c.fbox.samples = 10_000_000;
            }
            srblab::systems::SystemKind::SkewCenter { .. } => {
                c.grid.mc_per_cell = 256;
                c.noise.schedule = vec![0.015625, 0.00390625, 0.0009765625];
                c.block.alpha = 0.2;
                c.block.depth = 20;
                // leaves spread apart along the box: a finer plaque family and a
                // wider leaf tolerance keep the discarded fraction small
                c.fbox.separation = Some(0.04 / 32.0);
                c.fbox.tolerance = Some(0.0075);
                c.gibbs.levels = 2;
                c.gibbs.frame = 101_000;
            }
            srblab::systems::SystemKind::Contraction { .. } => {
                c.block.alpha = 0.2;
            }
        }
        Ok(c)
    }

    /// Reads a config file over the defaults of the system it names
    /// (`cat_map` when it names none), then validates it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json).map_err(|e| match e {
            CliError::Config(msg) => CliError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, is_json: bool) -> Result<Self, CliError> {
        let overlay: Value = if is_json {
            serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?
        };
        if !overlay.is_object() {
            return Err(CliError::config("the config must be a table of keys"));
        }
        let system = match overlay.get("system") {
            None => "cat_map",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(CliError::config("`system` must be a string")),
        };
        let mut merged = serde_json::to_value(Self::defaults(system)?).expect("defaults serialize");
        merge(&mut merged, overlay);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system_model()?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must not be empty"));
        }
        if self.noise.schedule.is_empty() {
            return Err(CliError::config("the noise schedule is empty"));
        }
        if self.noise.schedule.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(CliError::config("noise amplitudes must be positive"));
        }
        if self.noise.schedule.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(CliError::config("the noise schedule must be strictly decreasing"));
        }
        let positive = [
            ("noise.stationary", self.noise.stationary),
            ("pliss.epsilon", self.pliss.epsilon),
            ("block.alpha", self.block.alpha),
            ("block.mass_epsilon", self.block.mass_epsilon),
            ("box.delta", self.fbox.delta),
            ("box.beta", self.fbox.beta),
            ("box.tail", self.fbox.tail),
            ("box.ratio_tolerance", self.fbox.ratio_tolerance),
            ("entropy.tolerance", self.entropy.tolerance),
        ];
        let optional = [("box.separation", self.fbox.separation), ("box.tolerance", self.fbox.tolerance)];
        let optional = optional.iter().filter_map(|(k, v)| v.map(|v| (*k, v)));
        if let Some((key, v)) = positive.into_iter().chain(optional).find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(CliError::config(format!("{key} must be positive, got {v}")));
        }
        if self.block.mass_epsilon >= 1.0 {
            return Err(CliError::config("block.mass_epsilon must lie in (0,1)"));
        }
        let counts = [
            ("orbit.steps", self.orbit.steps),
            ("orbit.frame", self.orbit.frame),
            ("pliss.trials", self.pliss.trials),
            ("pliss.length", self.pliss.length),
            ("block.sample", self.block.sample),
            ("block.frame", self.block.frame),
            ("gibbs.levels", self.gibbs.levels),
            ("gibbs.frame", self.gibbs.frame),
            ("gibbs.samples", self.gibbs.samples),
            ("entropy.points", self.entropy.points),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::config(format!("{key} must be positive")));
        }
        PesinBlockParams::with_depth(self.block.ell, self.block.alpha, self.block.depth)
            .map_err(|e| CliError::config(format!("block: {e}")))?;
        if let Some(b) = &self.fbox.budget {
            b.validate().map_err(|e| CliError::config(format!("box.budget: {e}")))?;
        }
        Ok(())
    }

    /// The configured system with its parameter overrides.
    pub fn system_model(&self) -> Result<SmoothSystem, CliError> {
        if !BUILTIN_NAMES.contains(&self.system.as_str()) {
            return Err(CliError::config(format!("unknown system `{}` (expected one of {BUILTIN_NAMES:?})", self.system)));
        }
        builtin_system(&self.system)
            .and_then(|s| s.with_overrides(&self.parameters))
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn schedule(&self, dim: usize) -> Result<Vec<NoiseKernel>, CliError> {
        self.noise.schedule.iter().map(|&a| NoiseKernel::new(dim, a).map_err(|e| CliError::config(e.to_string()))).collect()
    }

    pub fn block_params(&self) -> PesinBlockParams {
        PesinBlockParams::with_depth(self.block.ell, self.block.alpha, self.block.depth).expect("validated")
    }

    /// The same box and block settings for every tested level.
    pub fn level_specs(&self) -> Vec<LevelSpec> {
        let mut ls = LevelSpec::new(self.block_params(), self.fbox.delta, self.fbox.beta);
        ls.budget = self.fbox.budget;
        ls.base_index = self.fbox.base_index;
        ls.tolerance = self.fbox.tolerance;
        ls.chain_keep = self.fbox.chain_keep;
        ls.separation = self.fbox.separation;
        vec![ls; self.gibbs.levels]
    }

    /// The config without its output directory, which does not affect
    /// results: what the run directory records and the manifest hashes.
    pub(crate) fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c
    }
}

fn is_empty_path(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // `parameters` is replaced wholesale, tables elsewhere merge
                    Some(slot) if k != "parameters" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
