use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::files::{sha256_hex, write_json};

/// Record of one command: everything needed to rerun it, plus digests of
/// what it read and wrote. `wall_time_ms` is the only field that varies
/// between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    /// File name to sha256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// File name to sha256 of every output file except the manifest.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

impl ManifestBuilder {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_time_ms: 0,
            },
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.manifest.seed = seed;
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.inputs.insert(file_name(path), sha256_hex(bytes));
    }

    pub fn output(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest.outputs.insert(file_name(path), sha256_hex(bytes));
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.wall_time_ms = self.started.elapsed().as_millis() as u64;
        write_json(path, &self.manifest)?;
        Ok(self.manifest)
    }
}
