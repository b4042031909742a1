//! Run directories and their `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Contains timings, so reruns differ.
    pub volatile: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEntry {
    pub path: String,
    pub sha256: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub model_format_version: u16,
    pub target: String,
    pub subcommand: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<ConfigEntry>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub created_unix: u64,
}

/// Output directory of one invocation. Every file written through it is
/// listed in the manifest.
#[derive(Debug)]
pub struct RunDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn create(dir: &Path, subcommand: &str, args: Vec<String>) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: "twn",
                version: env!("CARGO_PKG_VERSION"),
                model_format_version: twn::packfmt::VERSION,
                target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
                subcommand: subcommand.to_string(),
                args,
                seed: None,
                config: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                created_unix: 0,
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn set_config(&mut self, path: &Path, text: &str) {
        self.manifest.config = Some(ConfigEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(text.as_bytes()),
            text: text.to_string(),
        });
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            volatile: false,
        });
    }

    pub fn write(&mut self, name: &str, bytes: &[u8], volatile: bool) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        self.record(name, bytes, volatile);
        Ok(path)
    }

    /// Lists a file some other component already wrote into the directory.
    pub fn record_existing(&mut self, name: &str) -> CliResult<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|source| CliError::Output { path, source })?;
        self.record(name, &bytes, false);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8], volatile: bool) {
        self.manifest.outputs.retain(|e| e.path != name);
        self.manifest.outputs.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            volatile,
        });
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest.created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.path(MANIFEST_NAME);
        fs::write(&path, text + "\n").map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
