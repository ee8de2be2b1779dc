//! Per-run manifest, written before any other artifact and updated with the
//! files the run read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::failure::{data, CliResult};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub dataset: Option<String>,
    /// Splits whose files this run may open.
    pub splits: Vec<String>,
    /// Dataset files opened, relative to the dataset root, in order.
    pub files_read: Vec<String>,
    pub skipped: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            config,
            dataset: None,
            splits: Vec::new(),
            files_read: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).map_err(|e| data(e.to_string()))?;
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
