//! The run manifest: `manifest.json` at the root of the run directory.
//!
//! It holds the latest config snapshot, one record per stage (status,
//! timings, input and output hashes, warnings), an append-only event log,
//! and a listing of every file in the run directory with its SHA-256.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Hash over `inputs`; an unchanged value means the stage can be skipped.
    pub input_hash: String,
    /// Named inputs (config slices, external files, upstream stages) and their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the stage, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub duration_ms: u128,
    /// Work reused from an earlier attempt inside the stage (e.g. Complete transcripts).
    #[serde(default)]
    pub reused_items: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ran,
    CacheHit,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stage: String,
    pub event: EventKind,
    pub at_unix_ms: u128,
    pub input_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
    pub history: Vec<Event>,
    /// Every file under the run directory (this manifest included, unhashed).
    pub files: BTreeMap<String, Option<String>>,
    /// Composition of the simulated sample, filled in by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<serde_json::Value>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load_or_new(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest { tool_version: TOOL_VERSION.to_string(), ..Default::default() });
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("corrupt manifest {}: {e}", path.display())))
    }

    /// Refresh the file listing and write atomically.
    pub fn save(&mut self, run_dir: &Path) -> Result<(), CliError> {
        self.tool_version = TOOL_VERSION.to_string();
        let mut files = BTreeMap::new();
        for rel in list_files(run_dir)? {
            let hash = if rel == MANIFEST_FILE { None } else { Some(hash_file(&run_dir.join(&rel))?) };
            files.insert(rel, hash);
        }
        files.insert(MANIFEST_FILE.to_string(), None);
        self.files = files;
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&tmp, json).map_err(CliError::io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(CliError::io(&path))
    }

    pub fn record_event(&mut self, stage: &str, event: EventKind, input_hash: &str) {
        self.history.push(Event { stage: stage.to_string(), event, at_unix_ms: now_ms(), input_hash: input_hash.to_string() });
    }
}

pub fn now_ms() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Relative paths (with `/` separators) of all regular files under `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
        if !dir.exists() {
            return Ok(());
        }
        for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
            let entry = entry.map_err(CliError::io(dir))?;
            let path = entry.path();
            let kind = entry.file_type().map_err(CliError::io(&path))?;
            if kind.is_dir() {
                walk(root, &path, out)?;
            } else if kind.is_file() {
                out.push(relative(root, &path));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn relative(root: &Path, path: &Path) -> String {
    let rel: PathBuf = path.strip_prefix(root).unwrap_or(path).to_path_buf();
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}
