//! Experiment directories: content-hashed artifacts, a manifest and a lock.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    /// Command that last wrote the artifact.
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path to entry, in path order.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Commands run in this workspace, in order.
    pub history: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An experiment directory. Holding a `Workspace` holds its lock.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    manifest: Manifest,
}

impl Workspace {
    /// Creates the directory if needed and takes the lock.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(Error::Locked(lock)),
            Err(e) => return Err(e.into()),
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            match fs::read(&manifest_path)
                .map_err(Error::from)
                .and_then(|b| Ok(serde_json::from_slice(&b)?))
            {
                Ok(m) => m,
                Err(e) => {
                    let _ = fs::remove_file(&lock);
                    return Err(e);
                }
            }
        } else {
            Manifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.manifest.artifacts.contains_key(rel)
    }

    /// Writes an artifact and records its hash.
    pub fn write(&mut self, rel: &str, bytes: &[u8], command: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.manifest.artifacts.insert(
            rel.to_string(),
            ArtifactEntry {
                sha256: sha256_hex(bytes),
                command: command.to_string(),
            },
        );
        self.save_manifest()
    }

    /// Writes a file that is not tracked (logs with timings).
    pub fn write_untracked(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads a tracked artifact, verifying its hash.
    pub fn read(&self, rel: &str, what: &'static str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let entry = self.manifest.artifacts.get(rel).ok_or_else(|| Error::Missing {
            what,
            path: path.clone(),
        })?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(Error::Missing { what, path }),
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                path: rel.to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn record_command(&mut self, command: &str) -> Result<()> {
        self.manifest.history.push(command.to_string());
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        fs::write(self.path(MANIFEST_FILE), s)?;
        Ok(())
    }

    /// Hashes of every artifact, in path order.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.manifest
            .artifacts
            .iter()
            .map(|(k, v)| (k.clone(), v.sha256.clone()))
            .collect()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}
