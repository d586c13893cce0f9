//! Reproducibility manifests. Every command that writes a file drops a
//! `<file>.manifest.json` next to it, and report commands embed the same
//! structure in their `--json` output, so any artifact can be traced back
//! to the exact command, seed, and input bytes that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sprnn_core::fnv1a64;

use crate::Failure;

/// Bumped whenever a JSON report or manifest changes shape.
pub const SCHEMA_VERSION: u32 = 1;

/// A file the command read or wrote, stamped with a content checksum.
#[derive(Debug, Serialize)]
pub struct FileStamp {
    pub path: String,
    /// 64-bit FNV-1a over the raw file bytes, fixed-width hex.
    pub checksum_fnv1a64: String,
}

impl FileStamp {
    fn for_file(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path)
            .map_err(|e| Failure::Format(format!("cannot checksum {}: {e}", path.display())))?;
        Ok(FileStamp {
            path: path.display().to_string(),
            checksum_fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, parameters: serde_json::Value) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            tool: "sprnn",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            parameters,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn stamp_input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push(FileStamp::for_file(path)?);
        Ok(())
    }

    /// Stamps a file this command just wrote; call after the write so the
    /// checksum covers the final bytes.
    pub fn stamp_output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.push(FileStamp::for_file(path)?);
        Ok(())
    }

    /// Writes `<file>.manifest.json` next to `file` and returns its path.
    pub fn write_sidecar(&self, alongside: &Path) -> Result<PathBuf, Failure> {
        let path = sidecar_path(alongside);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Failure::Format(format!("cannot encode manifest: {e}")))?;
        text.push('\n');
        fs::write(&path, text)
            .map_err(|e| Failure::Format(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn sidecar_path(file: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", file.display()))
}
