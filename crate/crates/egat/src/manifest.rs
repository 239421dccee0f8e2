//! Run manifests: every command records its fully resolved configuration,
//! input digests and output digests, so a run can be re-executed and checked
//! bit for bit.
//!
//! The training log contains one wall-clock column that legitimately differs
//! between runs; its "stable" digest is computed with that column zeroed.
//! Every other output is digested raw.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OutputRecord {
    /// Path relative to the run's output directory.
    pub path: String,
    pub digest: String,
    /// Digest with volatile (timing) fields masked; equals `digest` for
    /// files without any.
    pub stable_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InputRecord {
    pub name: String,
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest<C> {
    pub command: C,
    pub seed: u64,
    pub threads: usize,
    pub version: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<OutputRecord>,
    pub wall_ms: f64,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

/// Digest of a whole directory: SHA-256 over the sorted list of
/// `(relative path, file digest)` pairs.
pub fn digest_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        hasher.update(rel.as_bytes());
        hasher.update(Sha256::digest(&bytes));
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Stable digest: the training log gets its wall-clock column zeroed first,
/// anything else is digested as-is.
pub fn stable_digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.file_name().map(|n| n == TRAIN_LOG_FILE).unwrap_or(false) {
        let text = String::from_utf8_lossy(&bytes);
        let mut canon = String::with_capacity(text.len());
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                canon.push_str(line);
            } else {
                let mut cols: Vec<&str> = line.split(',').collect();
                if cols.len() == 14 {
                    cols[12] = "0";
                }
                canon.push_str(&cols.join(","));
            }
            canon.push('\n');
        }
        Ok(digest_bytes(canon.as_bytes()))
    } else {
        Ok(digest_bytes(&bytes))
    }
}

/// Records one produced file.
pub fn record_output(out_dir: &Path, path: &Path) -> Result<OutputRecord> {
    let rel = path
        .strip_prefix(out_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(OutputRecord {
        path: rel,
        digest: digest_file(path)?,
        stable_digest: stable_digest_file(path)?,
    })
}

impl<C: Serialize + for<'de> Deserialize<'de>> RunManifest<C> {
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunManifest<C>> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(Into::into)
    }

    /// Compares this manifest's recorded outputs against the same-named files
    /// under `dir`, by stable digest. Returns the mismatching paths.
    pub fn compare_outputs(&self, dir: &Path) -> Result<Vec<String>> {
        let mut mismatches = Vec::new();
        for rec in &self.outputs {
            let candidate = dir.join(&rec.path);
            if !candidate.exists() {
                mismatches.push(format!("{}: missing", rec.path));
                continue;
            }
            let got = stable_digest_file(&candidate)?;
            if got != rec.stable_digest {
                mismatches.push(format!("{}: {} != {}", rec.path, got, rec.stable_digest));
            }
        }
        Ok(mismatches)
    }
}
