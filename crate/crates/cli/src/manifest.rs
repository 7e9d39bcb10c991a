use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub code_version: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
    pub exit_status: i32,
    pub error: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Tracks one run in `dir`, recording its artifacts and writing the
/// manifest when finished.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: String,
    seed: Option<u64>,
    started: String,
    artifacts: Vec<PathBuf>,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: String, seed: Option<u64>) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config,
            seed,
            started: now(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Atomically writes a file inside the run directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.record(name);
        Ok(path)
    }

    pub fn record(&mut self, name: impl Into<PathBuf>) {
        let p = name.into();
        if !self.artifacts.contains(&p) {
            self.artifacts.push(p);
        }
    }

    /// Writes the manifest and passes `result` through.
    pub fn finish(self, result: Result<(), Failure>) -> Result<(), Failure> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            started: self.started,
            finished: now(),
            artifacts: self.artifacts,
            exit_status: result.as_ref().map_or_else(Failure::exit_code, |_| 0),
            error: result.as_ref().err().map(|f| format!("{}: {}", f.class(), f.message())),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)?;
        result
    }
}
