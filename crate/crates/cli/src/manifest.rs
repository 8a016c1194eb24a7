//! `manifest.json`: what a run was started from and where its outputs live.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("AMLM_GIT_DESCRIBE"),
    ")"
);

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Output locations, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub config: String,
    pub trajectory: String,
    pub history: String,
    pub ranking: String,
    pub checkpoints: String,
    pub final_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputFile>,
    pub artifacts: Artifacts,
    /// `running`, `finished`, `diverged` or `failed`.
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_clock_secs: Option<f64>,
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn digest(role: &str, path: &Path) -> Result<InputFile, Failure> {
    let io_fail = |e: io::Error| Failure {
        code: crate::EXIT_IO,
        message: format!("cannot read {}: {e}", path.display()),
    };
    let mut file = fs::File::open(path).map_err(io_fail)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(io_fail)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputFile {
        role: role.to_string(),
        path: path.display().to_string(),
        bytes,
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Parses the canonical `key = value` form into a map.
pub fn config_map(kv: &str) -> BTreeMap<String, String> {
    kv.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Failure {
            code: crate::EXIT_IO,
            message: format!("cannot write {}: {e}", path.display()),
        })
    }

    pub fn read(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Failure {
            code: crate::EXIT_IO,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::invalid(format!("malformed {}: {e}", path.display())))
    }
}
