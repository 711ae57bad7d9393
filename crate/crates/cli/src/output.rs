//! Buffered, digest-stamped output files and the per-command manifest.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: &'a str,
    config: &'a RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

pub struct Outputs {
    dir: PathBuf,
    written: Vec<FileEntry>,
    inputs: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Renders into memory, then writes `name` (relative to the output directory).
    pub fn write(
        &mut self,
        name: &str,
        render: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        render(&mut buf)?;
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, &buf).map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        self.written.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(&buf),
        });
        Ok(path)
    }

    /// Writes `<command>_manifest.json` listing every input and output with its hash.
    pub fn finish(mut self, command: &str, cfg: &RunConfig, digest: &str) -> Result<PathBuf> {
        let outputs = std::mem::take(&mut self.written);
        let inputs = std::mem::take(&mut self.inputs);
        let manifest = Manifest {
            command,
            config_digest: digest,
            config: cfg,
            inputs,
            outputs,
        };
        self.write(&format!("{command}_manifest.json"), |buf| {
            serde_json::to_writer_pretty(&mut *buf, &manifest).expect("manifest serializes");
            buf.push(b'\n');
            Ok(())
        })
    }
}
