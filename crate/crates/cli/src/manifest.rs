//! Per-run manifest: the resolved configuration, its digest, the seed and
//! hashes of every file read or written.

use std::collections::BTreeMap;
use std::path::Path;

use ragcn::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        Ok(Manifest {
            command: command.to_string(),
            config: config.clone(),
            config_digest: sha256_hex(&canonical),
            seed: config.seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            results: serde_json::Value::Null,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write_artifact(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes)?;
        self.artifacts.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
