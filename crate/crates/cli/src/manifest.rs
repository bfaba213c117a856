use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    /// File name only, so manifests do not depend on where a run lives.
    pub name: String,
    pub sha256: String,
}

/// Run record written as `manifest.json` under `--out`.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seedlab_version: String,
    pub generator_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest(path: &Path) -> CliResult<FileDigest> {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(FileDigest { name, sha256: sha256_file(path)? })
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seedlab_version: env!("CARGO_PKG_VERSION").to_string(),
            generator_version: seedlab::toydata::io::GENERATOR_VERSION.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    /// Hashes the outputs and writes the manifest into `out`.
    pub fn write(mut self, out: &Path, outputs: &[PathBuf]) -> CliResult<PathBuf> {
        for p in outputs {
            self.outputs.push(digest(p)?);
        }
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Runtime(format!("manifest encoding: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
