//! Per-run record written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// SHA-256 of `blob <len>\0<content>`, the way git names blobs.
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            timings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        });
        Ok(())
    }

    /// Adds `seconds` to a phase.
    pub fn time(&mut self, phase: &str, seconds: f64) {
        *self.timings.entry(phase.to_string()).or_insert(0.0) += seconds.max(0.0);
    }

    /// Runs `f`, charging its wall time to `phase`.
    pub fn timed<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.time(phase, t.elapsed().as_secs_f64());
        r
    }

    pub fn write(&mut self, out_dir: &Path) -> Result<()> {
        self.outputs.sort();
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
