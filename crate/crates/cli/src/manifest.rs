//! Run manifests: config snapshot, input hashes, output paths and timing,
//! written next to each command's artifacts for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| anyhow::anyhow!("cannot hash {}: {e}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Record an input file with its content hash. Store-style inputs also
    /// hash the sibling `.bin` blob.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        let bin = path.with_extension("bin");
        if bin != path && bin.exists() {
            self.inputs
                .insert(bin.display().to_string(), sha256_file(&bin)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
        let bin = path.with_extension("bin");
        if bin != path && bin.exists() {
            self.outputs.push(bin);
        }
    }

    /// Write `manifest_<command>.json` into the output directory.
    pub fn write(self, out_dir: &Path) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join(format!("manifest_{}.json", self.command));
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json)
            .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))?;
        Ok(path)
    }
}
