//! Run manifests and atomic artifact writing.
//!
//! Every artifact is written to a temporary file in its target directory and
//! renamed into place. A manifest JSON sits alongside the primary output,
//! recording the command, arguments, input and output paths, seed, tool
//! version and wall time; re-running the recorded command reproduces the
//! outputs bit-identically.

use std::path::{Path, PathBuf};
use std::time::Instant;

use plumm::Result;
use serde::Serialize;

#[derive(Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    tool_version: String,
    wall_time_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Writes `bytes` atomically and records the path as an output.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.output(path);
        Ok(())
    }

    /// Writes the manifest next to the primary output (`<stem>.manifest.json`).
    pub fn finish(self, primary: &Path) -> Result<()> {
        let stem = primary.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        let path = primary.with_file_name(format!("{stem}.manifest.json"));
        let manifest = Manifest {
            command: self.command,
            argv: self.argv,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: self.started.elapsed().as_millis(),
        };
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(())
    }
}

/// Temp-file-and-rename write in the target directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp.partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
