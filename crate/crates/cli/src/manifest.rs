use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance written next to every run's artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// Digest of the effective model or scenario configuration.
    pub config_digest: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    pub seed: u64,
    pub threads: usize,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command_line: Vec<String>, seed: u64, threads: usize) -> Self {
        Self {
            command_line,
            config_digest: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            seed,
            threads,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn set_config(&mut self, text: &str) {
        self.config_digest = Some(sha256_hex(text.as_bytes()));
    }
}
