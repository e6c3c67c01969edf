use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance of one CLI run, written before any other output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Content hash of the config file, or of the effective config when no
    /// file was given.
    pub config_hash: String,
    pub effective_config: serde_json::Value,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub version: String,
}

/// Git-style blob hash: SHA-256 over `"blob <len>\0" + content`.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        raw_config: Option<&[u8]>,
        effective_config: serde_json::Value,
        seed: Option<u64>,
        output_dir: &Path,
    ) -> Result<Self> {
        let config_hash = match raw_config {
            Some(bytes) => content_hash(bytes),
            None => content_hash(serde_json::to_string(&effective_config)?.as_bytes()),
        };
        Ok(Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash,
            effective_config,
            seed,
            output_dir: output_dir.to_path_buf(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(self.output_dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.write()
    }
}
