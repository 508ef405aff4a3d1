//! Immutable keyed blob store on the local filesystem.
//!
//! Keys are slash-separated paths mirrored under the root directory. A put
//! writes a temporary file, syncs it, then hard-links it into place; the
//! link fails if the key exists, which gives atomic create-if-absent across
//! processes without locks.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

pub const MAX_KEY_LEN: usize = 512;
pub const POLL_INTERVAL: Duration = Duration::from_millis(20);
const TMP_DIR: &str = ".tmp";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid store key `{key}`: {reason}")]
    InvalidKey { key: String, reason: &'static str },
    #[error("key `{0}` already exists")]
    AlreadyExists(String),
    #[error("key `{0}` not found")]
    NotFound(String),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    PartialY,
    Scenarios,
    Result,
}

impl Artifact {
    pub fn as_str(self) -> &'static str {
        match self {
            Artifact::PartialY => "partial_y",
            Artifact::Scenarios => "scenarios",
            Artifact::Result => "result",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StoreKey(String);

impl StoreKey {
    pub fn new(key: impl Into<String>) -> Result<Self, StoreError> {
        let key = key.into();
        let invalid = |reason| StoreError::InvalidKey {
            key: key.clone(),
            reason,
        };
        if key.is_empty() || key.len() > MAX_KEY_LEN {
            return Err(invalid("length must be 1..=512"));
        }
        for part in key.split('/') {
            if part.is_empty() {
                return Err(invalid("empty path component"));
            }
            if part == "." || part == ".." {
                return Err(invalid("relative path component"));
            }
            if !part
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
            {
                return Err(invalid("components may use only [A-Za-z0-9_.-]"));
            }
        }
        if key.starts_with(TMP_DIR) {
            return Err(invalid("reserved prefix"));
        }
        Ok(Self(key))
    }

    /// `runs/<run>/regions/<region>/<artifact>`
    pub fn artifact(run: impl std::fmt::Display, region: impl std::fmt::Display, artifact: Artifact) -> Self {
        Self::new(format!("runs/{run}/regions/{region}/{}", artifact.as_str())).expect("well-formed artifact key")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for StoreKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for StoreKey {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, StoreError> {
        Self::new(s)
    }
}

impl From<StoreKey> for String {
    fn from(k: StoreKey) -> String {
        k.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub key: StoreKey,
    pub len: u64,
    /// SHA-256 of the blob, lowercase hex.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitOutcome {
    Complete,
    TimedOut(Vec<StoreKey>),
}

pub fn content_hash(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join(TMP_DIR))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &StoreKey) -> PathBuf {
        self.root.join(key.as_str())
    }

    pub fn put(&self, key: &StoreKey, blob: &[u8]) -> Result<Receipt, StoreError> {
        let dest = self.path(key);
        if dest.exists() {
            return Err(StoreError::AlreadyExists(key.to_string()));
        }
        fs::create_dir_all(dest.parent().expect("keys have a parent"))?;
        let tmp = self.root.join(TMP_DIR).join(format!(
            "{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(blob)?;
            f.sync_all()?;
        }
        let linked = fs::hard_link(&tmp, &dest);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(Receipt {
                key: key.clone(),
                len: blob.len() as u64,
                sha256: content_hash(blob),
            }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(StoreError::AlreadyExists(key.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        fs::read(self.path(key)).map_err(|e| match e.kind() {
            ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            _ => e.into(),
        })
    }

    pub fn contains(&self, key: &StoreKey) -> bool {
        self.path(key).is_file()
    }

    /// Keys starting with `prefix` (plain string prefix), sorted.
    pub fn list(&self, prefix: &str) -> Result<Vec<StoreKey>, StoreError> {
        let mut keys = Vec::new();
        for entry in WalkDir::new(&self.root).min_depth(1) {
            let entry = entry.map_err(|e| StoreError::Io(e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let rel: Vec<&str> = rel.iter().map(|c| c.to_str().unwrap_or("")).collect();
            if rel.first() == Some(&TMP_DIR) {
                continue;
            }
            let key = rel.join("/");
            if key.starts_with(prefix) {
                if let Ok(k) = StoreKey::new(key) {
                    keys.push(k);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn missing(&self, keys: &[StoreKey]) -> Vec<StoreKey> {
        keys.iter().filter(|k| !self.contains(k)).cloned().collect()
    }

    /// Blocks, polling every 20 ms, until all keys exist or the deadline passes.
    pub fn wait_for(&self, keys: &[StoreKey], deadline: Instant) -> WaitOutcome {
        loop {
            let missing = self.missing(keys);
            if missing.is_empty() {
                return WaitOutcome::Complete;
            }
            let now = Instant::now();
            if now >= deadline {
                return WaitOutcome::TimedOut(missing);
            }
            std::thread::sleep(POLL_INTERVAL.min(deadline - now));
        }
    }

    /// Async twin of [`FsStore::wait_for`] driven by the tokio clock.
    pub async fn wait_for_async(&self, keys: &[StoreKey], deadline: tokio::time::Instant) -> WaitOutcome {
        loop {
            let missing = self.missing(keys);
            if missing.is_empty() {
                return WaitOutcome::Complete;
            }
            let now = tokio::time::Instant::now();
            if now >= deadline {
                return WaitOutcome::TimedOut(missing);
            }
            tokio::time::sleep(POLL_INTERVAL.min(deadline - now)).await;
        }
    }
}
