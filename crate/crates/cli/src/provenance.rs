//! `run.json` records written by every subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphdiff::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Content hash of one file, computed like a git blob id but with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct Input {
    path: PathBuf,
    hash: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    /// Hash over the sorted `hash path` lines of all inputs.
    inputs_hash: String,
    inputs: &'a [Input],
    outputs: &'a [PathBuf],
    wall_ms: u128,
}

pub struct Run {
    command: String,
    config_hash: String,
    inputs: Vec<Input>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Run {
    /// `config_hash` identifies the configuration: the config file hash or a
    /// hash of the command-line arguments.
    pub fn start(command: &str, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_bytes(path, &bytes);
        Ok(())
    }

    pub fn input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(Input {
            path: path.to_path_buf(),
            hash: blob_hash(bytes),
        });
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn inputs_hash(&self) -> String {
        let mut lines: Vec<String> = self
            .inputs
            .iter()
            .map(|i| format!("{} {}\n", i.hash, i.path.display()))
            .collect();
        lines.sort();
        hex::encode(Sha256::digest(lines.concat()))
    }

    /// Write `run.json` into `dir`.
    pub fn finish(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rec = RunRecord {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &self.config_hash,
            inputs_hash: self.inputs_hash(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_ms: self.start.elapsed().as_millis(),
        };
        let path = dir.join("run.json");
        let mut bytes = serde_json::to_vec_pretty(&rec).expect("run record serializes");
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
