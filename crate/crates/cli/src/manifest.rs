use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ambientflow::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = ".failed";

/// First 16 hex digits of the SHA-256 of the compact JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// An output directory for one command. A `.failed` marker stays in place
/// until [`Run::finish`] writes the manifest, so an interrupted or failed
/// run is recognizable.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn begin(dir: &Path, command: &str, config_hash: String, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let _ = std::fs::remove_file(dir.join(MANIFEST));
        std::fs::write(dir.join(FAILED), "running\n")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                started_unix: now(),
                finished_unix: 0.0,
                artifacts: Vec::new(),
                metrics: BTreeMap::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seed
    }

    pub fn artifact(&mut self, rel: &str) {
        self.manifest.artifacts.push(rel.to_string());
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.manifest.metrics.insert(name.to_string(), value);
    }

    /// Writes the manifest through a temporary file and a rename, then
    /// removes the failure marker.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = now();
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST))?;
        std::fs::remove_file(self.dir.join(FAILED))?;
        Ok(self.manifest)
    }

    /// Records `err` in the failure marker.
    pub fn fail(self, err: &Error) -> Result<()> {
        std::fs::write(self.dir.join(FAILED), format!("{}\n", crate::exit::error_json(err)))?;
        Ok(())
    }
}

/// Runs `body` inside a [`Run`], finishing it on success and leaving the
/// marker with the error on failure.
pub fn run_in(
    dir: &Path,
    command: &str,
    config_hash: String,
    seed: u64,
    body: impl FnOnce(&mut Run) -> Result<()>,
) -> Result<RunManifest> {
    let mut run = Run::begin(dir, command, config_hash, seed)?;
    match body(&mut run) {
        Ok(()) => run.finish(),
        Err(e) => {
            run.fail(&e)?;
            Err(e)
        }
    }
}
