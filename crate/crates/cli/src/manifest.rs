//! One JSON manifest per command invocation.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dloseg::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub backbone_mode: Option<String>,
    pub overrides: Value,
    pub config: Value,
    pub outputs: Value,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            backbone_mode: None,
            overrides: Value::Null,
            config: Value::Null,
            outputs: Value::Null,
            status: "running".into(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    /// Records the outcome and writes `manifest.json` into `dir`.
    pub fn finish<T>(mut self, dir: &Path, result: &Result<T>) -> Result<()> {
        self.finished_unix = now();
        self.status = match result {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(FILE_NAME);
        fs::write(&path, serde_json::to_vec_pretty(&self)?).map_err(|e| io_err(&path, e))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
