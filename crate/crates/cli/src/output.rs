//! Run output directory: lock, payload files and timing metadata.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const METADATA_FILE: &str = "metadata.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "resolved_config.toml";

/// Exclusive handle on an output directory, released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    started: Instant,
    started_unix_ms: u128,
}

impl RunDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| write_err(root, e))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(root.to_path_buf())),
            Err(e) => return Err(write_err(&lock, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| write_err(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| write_err(&path, e))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let bytes = csv_bytes(rows).map_err(|message| CliError::Write {
            path: self.path(name),
            message,
        })?;
        self.write(name, bytes)
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let text = geoalign_core::formats::to_jsonl(rows).map_err(|e| CliError::Write {
            path: self.path(name),
            message: e.to_string(),
        })?;
        self.write(name, text)
    }

    /// Timing and host details, kept out of the deterministic payload.
    pub fn write_metadata(&self, command: &str, extra: serde_json::Value) -> CliResult<()> {
        let meta = serde_json::json!({
            "command": command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": self.started_unix_ms as u64,
            "wall_time_ms": self.started.elapsed().as_millis() as u64,
            "threads": rayon::current_num_threads(),
            "details": extra,
        });
        let text = serde_json::to_string_pretty(&meta).expect("metadata is serializable");
        self.write(METADATA_FILE, text + "\n")
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(self.root.join(LOCK_FILE)) {
            log::warn!("could not remove lock in {}: {e}", self.root.display());
        }
    }
}

fn write_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.into_inner().map_err(|e| e.to_string())
}
