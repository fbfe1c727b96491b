//! Run configuration shared by every subcommand.
//!
//! Settings resolve in rising precedence: TOML file, then the
//! `COTFORGE_SEED` / `COTFORGE_TOLERANCE` environment variables, then
//! command-line flags. Backends are declared by name in the file and picked
//! per role with `--reasoner` / `--verifier`; HTTP credentials come from the
//! environment variable the backend entry names, never from the file itself.

use anyhow::{bail, Context, Result};
use cotforge::backend::{build_backend, Backend, BackendConfig, BackendKind};
use cotforge::util::sha256_file;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const SEED_ENV: &str = "COTFORGE_SEED";
pub const TOLERANCE_ENV: &str = "COTFORGE_TOLERANCE";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Numeric tolerance for answer comparison.
    pub tolerance: f64,
    /// Named backend declarations.
    pub backends: BTreeMap<String, BackendConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: cotforge::answers::DEFAULT_TOLERANCE,
            backends: BTreeMap::new(),
        }
    }
}

/// The effective configuration plus provenance of the file it came from.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub run: RunConfig,
    pub config_path: Option<String>,
    pub config_digest: Option<String>,
}

/// Loads the config file (when given) and applies environment and flag
/// overrides. The environment is injected as a closure so tests can exercise
/// precedence without mutating process state.
pub fn resolve(
    file: Option<&Path>,
    seed_flag: Option<u64>,
    tolerance_flag: Option<f64>,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<ResolvedConfig> {
    let mut run = match file {
        Some(path) => {
            if !path.is_file() {
                bail!("file not found: {}", path.display());
            }
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let config_digest = match file {
        Some(path) => Some(
            sha256_file(path)
                .with_context(|| format!("cannot digest config {}", path.display()))?,
        ),
        None => None,
    };

    if let Some(raw) = env(SEED_ENV) {
        run.seed = raw
            .parse()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {raw:?}"))?;
    }
    if let Some(raw) = env(TOLERANCE_ENV) {
        run.tolerance = raw
            .parse()
            .with_context(|| format!("{TOLERANCE_ENV} must be a number, got {raw:?}"))?;
    }
    if let Some(seed) = seed_flag {
        run.seed = seed;
    }
    if let Some(tolerance) = tolerance_flag {
        run.tolerance = tolerance;
    }
    if !(run.tolerance > 0.0 && run.tolerance.is_finite()) {
        bail!("tolerance must be a positive number, got {}", run.tolerance);
    }

    Ok(ResolvedConfig {
        run,
        config_path: file.map(|p| p.display().to_string()),
        config_digest,
    })
}

impl ResolvedConfig {
    /// Builds the named backend, or fails listing what the config declares.
    pub fn backend(&self, name: &str) -> Result<Arc<dyn Backend>> {
        let entry = self.entry(name)?;
        build_backend(entry).with_context(|| format!("cannot build backend {name:?}"))
    }

    pub fn backend_kind(&self, name: &str) -> Result<BackendKind> {
        Ok(self.entry(name)?.kind)
    }

    fn entry(&self, name: &str) -> Result<&BackendConfig> {
        match self.run.backends.get(name) {
            Some(entry) => Ok(entry),
            None => {
                let available: Vec<&str> =
                    self.run.backends.keys().map(String::as_str).collect();
                bail!(
                    "backend {name:?} is not declared in the config (available: {})",
                    if available.is_empty() {
                        "none".to_string()
                    } else {
                        available.join(", ")
                    }
                );
            }
        }
    }
}
