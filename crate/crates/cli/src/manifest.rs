//! Provenance manifest written next to command outputs.
//!
//! Every file-producing subcommand leaves a `manifest.json` recording the
//! command line, the effective seed and tolerance, and SHA-256 digests of
//! all inputs and outputs, so a run can be audited and reproduced later.
//! Wall time is informational and is the one field expected to differ
//! between otherwise identical runs.

use crate::config::ResolvedConfig;
use anyhow::{Context, Result};
use cotforge::util::sha256_file;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// Input path -> SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u128,
}

impl Manifest {
    pub fn new(command: &str, resolved: &ResolvedConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: resolved.run.seed,
            tolerance: resolved.run.tolerance,
            config_file: resolved.config_path.clone(),
            config_digest: resolved.config_digest.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)
            .with_context(|| format!("cannot digest input {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)
            .with_context(|| format!("cannot digest output {}", path.display()))?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Stamps the elapsed time and writes the manifest as pretty JSON.
    pub fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_time_ms = started.elapsed().as_millis();
        let body = serde_json::to_string_pretty(&self).context("manifest serialization")?;
        std::fs::write(path, body + "\n")
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(())
    }
}
