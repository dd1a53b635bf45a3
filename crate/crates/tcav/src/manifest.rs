//! Run manifests: one JSON record per CLI invocation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Digests of `path`: the file itself, or every regular file below a
/// directory, keyed by display path.
pub fn digests(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.display().to_string(), file_digest(&p)?);
                }
            }
        }
    } else {
        out.insert(path.display().to_string(), file_digest(path)?);
    }
    Ok(out)
}

/// Whether `path` names a run manifest (`manifest.json` or
/// `<file>.manifest.json`).
pub fn is_run_manifest(path: &str) -> bool {
    Path::new(path)
        .file_name()
        .is_some_and(|n| n.to_string_lossy().ends_with("manifest.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file (the manifest itself excluded).
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_ms: u128,
    pub versions: BTreeMap<String, String>,
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    master_seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Recorder {
            command: command.into(),
            config: serde_json::Value::Null,
            master_seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    pub fn seed(&mut self, seed: u64) {
        self.master_seed = Some(seed);
    }

    /// Records the digests of an input file or directory. Run manifests
    /// inside a directory are skipped: their wall-clock field changes on
    /// every run.
    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let all = digests(path)?;
        self.inputs.extend(
            all.into_iter()
                .filter(|(p, _)| !(path.is_dir() && is_run_manifest(p))),
        );
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    pub fn finish(self, manifest_path: impl AsRef<Path>) -> Result<RunManifest> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.extend(digests(p)?);
        }
        let manifest_path = manifest_path.as_ref();
        outputs.remove(&manifest_path.display().to_string());
        let versions = BTreeMap::from([
            ("tcav".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("tcav-core".to_string(), tcav_core::VERSION.to_string()),
        ]);
        let m = RunManifest {
            command: self.command,
            config: self.config,
            master_seed: self.master_seed,
            inputs: self.inputs,
            outputs,
            wall_clock_ms: self.start.elapsed().as_millis(),
            versions,
        };
        store::write_json(manifest_path, &m)?;
        Ok(m)
    }
}
