//! Run manifests: the resolved configuration plus content digests of
//! every input and output. Re-running a command with the same inputs
//! and settings reproduces the manifest byte for byte, so a manifest
//! diff is a complete audit of what changed between two runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::fail::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let mut out = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

pub fn digest_file(path: &Path) -> Result<String, Failure> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Accumulates one run's provenance; [`Manifest::write`] renders it.
pub struct Manifest {
    command: &'static str,
    config: Vec<(String, String)>,
    /// (path as given, digest) in insertion order.
    inputs: Vec<(String, String)>,
    /// (basename, digest) in insertion order.
    outputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Manifest {
        Manifest { command, config: Vec::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn config(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.config.push((key.into(), value.into()));
    }

    pub fn config_all(&mut self, pairs: Vec<(String, String)>) {
        self.config.extend(pairs);
    }

    /// Digest an input file under the path the user supplied.
    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push((path.display().to_string(), digest_file(path)?));
        Ok(())
    }

    /// Digest an output file under its basename; outputs live next to the
    /// manifest, so the basename keeps manifests location-independent.
    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        let name = path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.push((name, digest_file(path)?));
        Ok(())
    }

    /// Render and write `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let mut config_block = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(config_block, "config.{k}={v}");
        }
        let mut text = format!("command={}\n", self.command);
        text.push_str(&config_block);
        let _ = writeln!(text, "config_sha256={}", sha256_hex(config_block.as_bytes()));
        for (name, digest) in &self.inputs {
            let _ = writeln!(text, "input.{name}={digest}");
        }
        for (name, digest) in &self.outputs {
            let _ = writeln!(text, "output.{name}={digest}");
        }
        fs::write(dir.join("manifest.txt"), text)?;
        Ok(())
    }
}
