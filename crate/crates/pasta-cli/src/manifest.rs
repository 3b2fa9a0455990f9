//! Run manifests: every command snapshots its resolved configuration, the
//! content digest of the data it consumed, per-stage wall-clock, and a
//! digest inventory of every file it produced. The manifest is the one
//! place an artifact directory can be audited from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pasta_core::data::ImageBatch;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("digesting {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content digest of the loaded splits: labels and image tensors in their
/// stored order, so the value pins subset selection as well as pixel data.
pub fn dataset_digest(train: &ImageBatch<f32>, test: &ImageBatch<f32>) -> String {
    let mut hasher = Sha256::new();
    for split in [train, test] {
        hasher.update((split.len() as u64).to_le_bytes());
        hasher.update(&split.labels);
        for &value in split.images.iter() {
            hasher.update(value.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

/// The audit record a command leaves beside its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    /// The resolved experiment document, embedded verbatim.
    pub config_toml: String,
    pub dataset_digest: String,
    pub classes: Vec<String>,
    /// Stage name → elapsed seconds, in execution order under the map's
    /// key ordering.
    pub stage_seconds: BTreeMap<String, f64>,
    /// Relative path → sha256 of every produced file except the manifest
    /// itself.
    pub files: BTreeMap<String, String>,
    /// Free-form headline numbers (accuracy, attack rates, norms).
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            code_version: format!("pasta {}", env!("CARGO_PKG_VERSION")),
            seed: config.seed,
            config_toml: config.to_toml()?,
            dataset_digest: String::new(),
            classes: Vec::new(),
            stage_seconds: BTreeMap::new(),
            files: BTreeMap::new(),
            metrics: BTreeMap::new(),
        })
    }

    /// Times `work` and records it under `stage`.
    pub fn stage<T>(&mut self, stage: &str, work: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let value = work()?;
        let elapsed = started.elapsed().as_secs_f64();
        if self.stage_seconds.insert(stage.to_string(), elapsed).is_some() {
            bail!("stage `{stage}` recorded twice");
        }
        Ok(value)
    }

    /// Registers a produced file, keyed by its path relative to `out`.
    pub fn record_file(&mut self, out: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(out).unwrap_or(path);
        let digest = sha256_file(path)?;
        self.files.insert(rel.to_string_lossy().into_owned(), digest);
        Ok(())
    }

    pub fn record_metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).context("parsing manifest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn toy_batch(fill: f32) -> ImageBatch<f32> {
        ImageBatch::new(Array4::from_elem((2, 1, 4, 4), fill), vec![0, 1], 2).unwrap()
    }

    #[test]
    fn digests_are_stable_and_content_sensitive() {
        let a = dataset_digest(&toy_batch(0.25), &toy_batch(0.5));
        let b = dataset_digest(&toy_batch(0.25), &toy_batch(0.5));
        assert_eq!(a, b);
        let c = dataset_digest(&toy_batch(0.25), &toy_batch(0.75));
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn manifest_round_trips_with_file_inventory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let artifact = out.join("table.csv");
        std::fs::write(&artifact, "x,y\n1,2\n").unwrap();

        let config = ExperimentConfig::tiny();
        let mut manifest = RunManifest::new("demo", &config).unwrap();
        manifest.dataset_digest = "abc".into();
        let value = manifest.stage("load", || Ok(41)).unwrap();
        assert_eq!(value, 41);
        assert!(manifest.stage("load", || Ok(())).is_err(), "duplicate stage");
        manifest.record_file(out, &artifact).unwrap();
        manifest.record_metric("accuracy", 0.75);
        let path = manifest.write(out).unwrap();

        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.command, "demo");
        assert_eq!(loaded.files["table.csv"], sha256_file(&artifact).unwrap());
        assert!(loaded.stage_seconds.contains_key("load"));
        assert_eq!(loaded.metrics["accuracy"], 0.75);
        let reparsed = ExperimentConfig::from_toml(&loaded.config_toml).unwrap();
        assert_eq!(reparsed.seed, config.seed);
    }
}
