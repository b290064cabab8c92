use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record written next to every output so the run can be repeated exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub artifact_version: String,
}

impl RunManifest {
    pub fn new(argv: &[String], config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            // argv[0] depends on how the binary was invoked, not on the run.
            command: argv.iter().skip(1).cloned().collect(),
            config,
            seeds,
            inputs: Vec::new(),
            artifact_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        }
    }

    pub fn with_input(mut self, path: &Path) -> io::Result<Self> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        });
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        json.push('\n');
        fs::write(path, json)
    }
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
