//! Per-stage manifests: what produced an artifact directory and from what.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the artifact root when the file lives under it.
    pub path: String,
    pub sha256: String,
}

/// One upstream stage this artifact was built from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage: String,
    pub dir: String,
    /// Digest over the upstream stage's output hashes.
    pub outputs_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub lineage: Vec<Lineage>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn display_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn file_hash(root: &Path, path: &Path) -> Result<FileHash> {
    Ok(FileHash {
        path: display_path(root, path),
        sha256: hash_file(path)?,
    })
}

impl ExperimentManifest {
    /// Digest over the output hashes only, so reruns that produce the same
    /// payload agree regardless of timestamps.
    pub fn outputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.outputs {
            h.update(f.path.as_bytes());
            h.update([0]);
            h.update(f.sha256.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn lineage_entry(&self, root: &Path, dir: &Path) -> Lineage {
        Lineage {
            stage: self.stage.clone(),
            dir: display_path(root, dir),
            outputs_sha256: self.outputs_digest(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the manifest of a finished stage and checks it against the
    /// current configuration and the files on disk.
    pub fn load_verified(root: &Path, dir: &Path, stage: &'static str, config_hash: &str) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { stage, path });
        }
        let m = Self::read(dir)?;
        if m.stage != stage {
            return Err(Error::Config(format!(
                "{} belongs to stage `{}`, expected `{stage}`",
                path.display(),
                m.stage
            )));
        }
        if m.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{} was produced with a different configuration; rerun `{stage}`",
                dir.display()
            )));
        }
        for f in &m.outputs {
            let file = root.join(&f.path);
            if !file.exists() {
                return Err(Error::MissingPrerequisite { stage, path: file });
            }
            if hash_file(&file)? != f.sha256 {
                return Err(Error::Config(format!(
                    "{} changed since stage `{stage}` wrote it; rerun `{stage}`",
                    file.display()
                )));
            }
        }
        Ok(m)
    }
}
