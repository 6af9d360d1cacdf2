//! Run manifests: every CLI command records its resolved configuration,
//! seeds, input/output digests, wall-clock, and a peak-memory estimate, so
//! any result file can be traced back to exactly one invocation.

use crate::error::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Peak RSS estimate from /proc (kB), 0 when unavailable.
pub fn peak_memory_kb() -> u64 {
    if let Ok(status) = fs::read_to_string("/proc/self/status") {
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                return rest
                    .trim()
                    .trim_end_matches(" kB")
                    .trim()
                    .parse()
                    .unwrap_or(0);
            }
        }
    }
    0
}

#[derive(Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub wall_clock_sec: f64,
    pub peak_memory_kb: u64,
    pub extra: serde_json::Value,
}

/// Builder that tracks a command's lifetime and writes the manifest
/// atomically at the end.
pub struct ManifestBuilder {
    command: String,
    config: Vec<(String, String)>,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    extra: serde_json::Value,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: Vec::new(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: serde_json::Value::Null,
            started: Instant::now(),
        }
    }

    pub fn config_kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn extra(&mut self, value: serde_json::Value) {
        self.extra = value;
    }

    /// Digest all referenced files and write `<dir>/run_manifest.json`
    /// atomically. Returns the manifest path.
    pub fn write(self, dir: &Path) -> Result<PathBuf> {
        let refs = |paths: &[PathBuf]| -> Result<Vec<FileRef>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileRef {
                        path: p.display().to_string(),
                        sha256: file_digest(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seed: self.seed,
            inputs: refs(&self.inputs)?,
            outputs: refs(&self.outputs)?,
            wall_clock_sec: self.started.elapsed().as_secs_f64(),
            peak_memory_kb: peak_memory_kb(),
            extra: self.extra,
        };
        fs::create_dir_all(dir)?;
        let path = dir.join("run_manifest.json");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

impl From<serde_json::Error> for crate::Error {
    fn from(e: serde_json::Error) -> Self {
        crate::Error::Format(format!("json: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_digests_outputs_and_is_valid_json() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("result.txt");
        fs::write(&out, b"hello").unwrap();
        let mut b = ManifestBuilder::new("test-cmd", 42);
        b.config_kv("alpha", 1.5);
        b.output(&out);
        let path = b.write(dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "test-cmd");
        assert_eq!(v["seed"], 42);
        assert_eq!(
            v["outputs"][0]["sha256"],
            sha256_hex(b"hello").as_str()
        );
    }
}
