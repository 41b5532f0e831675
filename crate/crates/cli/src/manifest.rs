//! `run.json`: what a subcommand was given and what it wrote, with enough
//! detail (resolved config, input digests, seed) to rerun it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sgcd::dataset::{sha256_hex, sidecar};
use sgcd::{Error, Result};

pub const TOOL: &str = "sgcd";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct InputRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
    /// Digest of the `.bin` payload next to the manifest file, when present.
    pub payload_sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub inputs: Vec<InputRef>,
    pub outputs: Vec<String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value, seed: Option<u64>, runtime: &Runtime) -> Self {
        RunManifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            subcommand: subcommand.into(),
            config,
            seed,
            threads: runtime.threads,
            deterministic: runtime.deterministic,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bin = sidecar(path, "bin");
        let payload_sha256 = if bin.exists() { Some(file_sha256(&bin)?) } else { None };
        self.inputs.push(InputRef {
            role: role.into(),
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
            payload_sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Process-wide settings from the global flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct Runtime {
    pub threads: Option<usize>,
    pub deterministic: bool,
}

/// `<path>.run.json`, for subcommands whose output is a single file.
pub fn manifest_beside(path: &Path) -> PathBuf {
    sidecar(path, "run.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
