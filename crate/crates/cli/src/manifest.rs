use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<OutputRecord>,
    pub wall_clock_seconds: f64,
}

/// What a run produced. Timings vary between runs; everything else is
/// reproduced exactly by an identical config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(pipeline: &str, config_hash: String) -> Self {
        Self { pipeline: pipeline.to_string(), config_hash, artifact_version: env!("CARGO_PKG_VERSION").to_string(), stages: Vec::new() }
    }

    /// Config hash and every output checksum, keyed `stage/file`.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("config".to_string(), self.config_hash.clone());
        for s in &self.stages {
            for o in &s.outputs {
                m.insert(format!("{}/{}", s.name, o.file), o.sha256.clone());
            }
        }
        m
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory of one run; stages write through it so every file is
/// checksummed into the manifest.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(dir: &Path, pipeline: &str, config_hash: String) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self { dir: dir.to_path_buf(), manifest: RunManifest::new(pipeline, config_hash) })
    }

    /// Runs one stage; module errors are tagged with the stage name.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut StageOut) -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let mut out = StageOut { dir: &self.dir, outputs: Vec::new() };
        let value = f(&mut out).map_err(|e| match e {
            CliError::Stage { stage, source } if stage.is_empty() => CliError::Stage { stage: name.to_string(), source },
            other => other,
        })?;
        let outputs = out.outputs;
        self.manifest.stages.push(StageRecord { name: name.to_string(), outputs, wall_clock_seconds: start.elapsed().as_secs_f64() });
        Ok(value)
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
        Ok(self.manifest)
    }
}

pub struct StageOut<'a> {
    dir: &'a Path,
    outputs: Vec<OutputRecord>,
}

impl StageOut<'_> {
    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(file);
        std::fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(OutputRecord { file: file.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(file, text.as_bytes())
    }

    /// Writes whatever `fill` emits; `fill` uses the core CSV writers.
    pub fn csv(&mut self, file: &str, fill: impl FnOnce(&mut Vec<u8>) -> srblab::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(crate::pipelines::module)?;
        self.write(file, &buf)
    }
}
