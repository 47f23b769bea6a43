//! Run manifests: what was run, with which resolved config, on which bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "evssm-manifest";
pub const ARTIFACT_VERSION: &str = concat!("evssm ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub artifact_version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration after file values and flags are merged.
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Output paths are recorded relative to the output location.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            artifact_version: ARTIFACT_VERSION.into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config).map_err(CliError::other)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(CliError::other)?;
        std::fs::write(path, text + "\n").map_err(CliError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Other(format!("{}: not a run manifest", path.display())));
        }
        Ok(m)
    }
}
