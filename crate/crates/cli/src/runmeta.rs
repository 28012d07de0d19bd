//! Run manifests: every command writes a record of its exact invocation,
//! configuration, seeds, and input hashes next to its outputs, so any run
//! can be replayed byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::{reports, FormatError};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argv as invoked (excluding the program name).
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input file path -> SHA-256.
    pub input_hashes: BTreeMap<String, String>,
    /// Outputs relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub toolkit_version: String,
}

pub fn sha256_file(path: &Path) -> Result<String, FormatError> {
    let data = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    let digest = Sha256::digest(&data);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub struct RunRecorder {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl RunRecorder {
    pub fn new(command: &str, out_dir: &Path, config: serde_json::Value, seeds: Vec<u64>) -> RunRecorder {
        let argv: Vec<String> = std::env::args().skip(1).collect();
        RunRecorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv,
                config,
                seeds,
                input_hashes: BTreeMap::new(),
                outputs: Vec::new(),
                toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            },
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), FormatError> {
        let hash = sha256_file(path)?;
        self.manifest
            .input_hashes
            .insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        let rel = path
            .strip_prefix(&self.out_dir)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        self.manifest.outputs.push(rel);
    }

    /// Writes `run_manifest.json` into the output directory.
    pub fn finish(mut self) -> Result<(), FormatError> {
        self.manifest.outputs.sort();
        let path = self.out_dir.join("run_manifest.json");
        reports::write_json(&path, &self.manifest)
    }
}
