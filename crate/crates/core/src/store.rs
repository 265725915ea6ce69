//! Content-addressed checkpoint store.
//!
//! Layout under the cache root:
//!
//! ```text
//! <root>/.lock                              writer lock
//! <root>/.staging/                          in-flight commits, removed on open
//! <root>/<hex[0:2]>/<hex[2:64]>/meta.json
//! <root>/<hex[0:2]>/<hex[2:64]>/stdout
//! <root>/<hex[0:2]>/<hex[2:64]>/stderr
//! <root>/<hex[0:2]>/<hex[2:64]>/result      only when a payload exists
//! ```
//!
//! An entry is written completely into a staging directory, synced, and
//! published with a single directory rename, so readers see either the
//! whole entry or nothing.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{TaskResult, TaskStatus};
use crate::identity::{TaskKey, ENCODING_VERSION};

pub const META_FORMAT: u32 = 1;
pub const DEFAULT_CACHE_DIR: &str = ".mxrun/cache";

const STAGING_DIR: &str = ".staging";
const LOCK_FILE: &str = ".lock";
const META_FILE: &str = "meta.json";
const STDOUT_FILE: &str = "stdout";
const STDERR_FILE: &str = "stderr";
const RESULT_FILE: &str = "result";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryStatus {
    Succeeded,
    Failed,
}

/// Contents of `meta.json`. Field names are part of the on-disk format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub format: u32,
    pub key: TaskKey,
    pub status: EntryStatus,
    pub exit_code: Option<i32>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub duration_ms: u64,
    pub encoding_version: u32,
    pub tool_version: String,
    pub error_class: Option<String>,
    pub error_message: Option<String>,
    pub stdout_len: u64,
    pub stderr_len: u64,
    pub result_len: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub meta: EntryMeta,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub result: Option<Vec<u8>>,
}

impl CheckpointEntry {
    pub fn key(&self) -> TaskKey {
        self.meta.key
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    Hit(CheckpointEntry),
    Miss,
    Corrupt(String),
}

impl Lookup {
    /// The entry, if it is complete and recorded a success.
    pub fn success(self) -> Option<CheckpointEntry> {
        match self {
            Lookup::Hit(e) if e.meta.status == EntryStatus::Succeeded => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cache directory {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cache {0} is locked by another mxrun process")]
    Locked(PathBuf),
    #[error("cache was opened read-only; this operation needs the writer lock")]
    ReadOnly,
    #[error("refusing to store a {0} result")]
    NotStorable(&'static str),
    #[doc(hidden)]
    #[error("commit interrupted before {0:?}")]
    Interrupted(CommitStep),
}

trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T, StoreError>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T, StoreError> {
        self.map_err(|source| StoreError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    /// Wait for the writer lock.
    Exclusive,
    /// Fail with [`StoreError::Locked`] if another process holds it.
    TryExclusive,
    /// No lock; lookups only.
    ReadOnly,
}

/// The ordered steps of one commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitStep {
    CreateStaging,
    WriteStdout,
    WriteStderr,
    WriteResult,
    WriteMeta,
    SyncStaging,
    CreateFanout,
    Publish,
    SyncParent,
}

pub const COMMIT_STEPS: [CommitStep; 9] = [
    CommitStep::CreateStaging,
    CommitStep::WriteStdout,
    CommitStep::WriteStderr,
    CommitStep::WriteResult,
    CommitStep::WriteMeta,
    CommitStep::SyncStaging,
    CommitStep::CreateFanout,
    CommitStep::Publish,
    CommitStep::SyncParent,
];

/// Where a simulated crash stops a commit.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillPoint {
    /// The step never starts.
    Before(CommitStep),
    /// Write steps only: half the bytes reach the file, unsynced.
    MidWrite(CommitStep),
}

/// Blob and metadata to commit under one key.
#[derive(Debug, Clone)]
pub struct NewEntry<'a> {
    pub meta: EntryMeta,
    pub stdout: &'a [u8],
    pub stderr: &'a [u8],
    pub result: Option<&'a [u8]>,
}

impl<'a> NewEntry<'a> {
    /// Entry for a task result; fails for results that must not be cached.
    pub fn from_result(result: &'a TaskResult, allow_failed: bool) -> Result<Self, StoreError> {
        let status = match result.status {
            TaskStatus::Succeeded => EntryStatus::Succeeded,
            TaskStatus::Failed if allow_failed => EntryStatus::Failed,
            TaskStatus::Failed => return Err(StoreError::NotStorable("failed")),
            TaskStatus::Restored => return Err(StoreError::NotStorable("restored")),
        };
        let meta = EntryMeta {
            format: META_FORMAT,
            key: result.key,
            status,
            exit_code: result.exit_code,
            started_at_ms: result.started_at_ms,
            finished_at_ms: result.finished_at_ms,
            duration_ms: result.duration_ms,
            encoding_version: ENCODING_VERSION,
            tool_version: crate::TOOL_VERSION.to_owned(),
            error_class: result.error.as_ref().map(|e| e.class.as_str().to_owned()),
            error_message: result.error.as_ref().map(|e| e.message.clone()),
            stdout_len: result.stdout.len() as u64,
            stderr_len: result.stderr.len() as u64,
            result_len: result.payload.as_ref().map(|p| p.len() as u64),
        };
        Ok(NewEntry {
            meta,
            stdout: &result.stdout,
            stderr: &result.stderr,
            result: result.payload.as_deref(),
        })
    }
}

pub enum PurgeScope<'a> {
    All,
    KeysNotIn(&'a HashSet<TaskKey>),
}

#[derive(Debug)]
pub struct CheckpointStore {
    root: PathBuf,
    lock: Option<File>,
    seq: AtomicU64,
}

impl CheckpointStore {
    /// Opens (creating if needed) the store at `root`. Writer modes take the
    /// lock and clear debris left by interrupted commits.
    pub fn open(root: impl Into<PathBuf>, mode: LockMode) -> Result<Self, StoreError> {
        let root = root.into();
        if mode == LockMode::ReadOnly {
            if !root.is_dir() {
                fs::metadata(&root).at(&root)?;
            }
            return Ok(CheckpointStore {
                root,
                lock: None,
                seq: AtomicU64::new(0),
            });
        }
        fs::create_dir_all(root.join(STAGING_DIR)).at(&root)?;
        let lock_path = root.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .at(&lock_path)?;
        match mode {
            LockMode::Exclusive => lock.lock().at(&lock_path)?,
            LockMode::TryExclusive => match lock.try_lock() {
                Ok(()) => {}
                Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(root)),
                Err(fs::TryLockError::Error(e)) => return Err(e).at(&lock_path),
            },
            LockMode::ReadOnly => unreachable!(),
        }
        let store = CheckpointStore {
            root,
            lock: Some(lock),
            seq: AtomicU64::new(0),
        };
        store.collect_garbage()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    /// Directory an entry lives in; a pure function of the key.
    pub fn entry_dir(&self, key: &TaskKey) -> PathBuf {
        let hex = key.to_hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    /// Blob reference relative to the cache root, e.g. `ab/cd…/stdout`.
    pub fn blob_ref(key: &TaskKey, blob: &str) -> String {
        let hex = key.to_hex();
        format!("{}/{}/{}", &hex[..2], &hex[2..], blob)
    }

    fn collect_garbage(&self) -> Result<(), StoreError> {
        let staging = self.root.join(STAGING_DIR);
        for item in fs::read_dir(&staging).at(&staging)? {
            let path = item.at(&staging)?.path();
            let removed = if path.is_dir() {
                fs::remove_dir_all(&path)
            } else {
                fs::remove_file(&path)
            };
            if let Err(e) = removed {
                log::warn!("could not remove staging debris {}: {e}", path.display());
            }
        }
        Ok(())
    }

    pub fn lookup(&self, key: &TaskKey) -> Lookup {
        let dir = self.entry_dir(key);
        let meta_path = dir.join(META_FILE);
        let meta_bytes = match fs::read(&meta_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return if dir.exists() {
                    Lookup::Corrupt("meta.json missing".into())
                } else {
                    Lookup::Miss
                };
            }
            Err(e) => return Lookup::Corrupt(format!("meta.json unreadable: {e}")),
        };
        let meta: EntryMeta = match serde_json::from_slice(&meta_bytes) {
            Ok(m) => m,
            Err(e) => return Lookup::Corrupt(format!("meta.json invalid: {e}")),
        };
        if meta.key != *key {
            return Lookup::Corrupt(format!("meta.json names key {} but is stored under {key}", meta.key));
        }
        if meta.format != META_FORMAT {
            return Lookup::Corrupt(format!("unsupported meta format {}", meta.format));
        }
        let read_blob = |name: &str, want: u64| -> Result<Vec<u8>, String> {
            let bytes = fs::read(dir.join(name)).map_err(|e| format!("{name} unreadable: {e}"))?;
            if bytes.len() as u64 != want {
                return Err(format!("{name} has {} bytes, meta says {want}", bytes.len()));
            }
            Ok(bytes)
        };
        let stdout = match read_blob(STDOUT_FILE, meta.stdout_len) {
            Ok(b) => b,
            Err(e) => return Lookup::Corrupt(e),
        };
        let stderr = match read_blob(STDERR_FILE, meta.stderr_len) {
            Ok(b) => b,
            Err(e) => return Lookup::Corrupt(e),
        };
        let result = match meta.result_len {
            Some(len) => match read_blob(RESULT_FILE, len) {
                Ok(b) => Some(b),
                Err(e) => return Lookup::Corrupt(e),
            },
            None if dir.join(RESULT_FILE).exists() => {
                return Lookup::Corrupt("result blob present but not recorded in meta".into())
            }
            None => None,
        };
        Lookup::Hit(CheckpointEntry {
            meta,
            stdout,
            stderr,
            result,
        })
    }

    /// Persists a task result. Only successes are accepted unless
    /// `allow_failed` is set.
    pub fn store(&self, result: &TaskResult, allow_failed: bool) -> Result<CheckpointEntry, StoreError> {
        self.commit(NewEntry::from_result(result, allow_failed)?)
    }

    /// Atomically publishes an entry. Storing a success over an existing
    /// success is a no-op that returns the existing entry.
    pub fn commit(&self, entry: NewEntry<'_>) -> Result<CheckpointEntry, StoreError> {
        self.commit_until(entry, None)
    }

    /// Runs a commit but stops at `kill`, leaving whatever a crash at that
    /// point would leave on disk.
    #[doc(hidden)]
    pub fn commit_interrupted(&self, entry: NewEntry<'_>, kill: KillPoint) -> Result<(), StoreError> {
        match self.commit_until(entry, Some(kill)) {
            Err(StoreError::Interrupted(_)) | Ok(_) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn commit_until(&self, entry: NewEntry<'_>, kill: Option<KillPoint>) -> Result<CheckpointEntry, StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let key = entry.meta.key;
        let committed = || CheckpointEntry {
            meta: entry.meta.clone(),
            stdout: entry.stdout.to_vec(),
            stderr: entry.stderr.to_vec(),
            result: entry.result.map(<[u8]>::to_vec),
        };
        let existing = self.lookup(&key);
        if let Lookup::Hit(found) = &existing {
            if found.meta.status == EntryStatus::Succeeded {
                return Ok(found.clone());
            }
        }

        let gate = |step: CommitStep| -> Result<(), StoreError> {
            match kill {
                Some(KillPoint::Before(s)) if s == step => Err(StoreError::Interrupted(step)),
                _ => Ok(()),
            }
        };
        let torn = |step: CommitStep| matches!(kill, Some(KillPoint::MidWrite(s)) if s == step);

        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let staging = self
            .root
            .join(STAGING_DIR)
            .join(format!("{}-{}-{seq}", key.to_hex(), std::process::id()));

        gate(CommitStep::CreateStaging)?;
        fs::create_dir(&staging).at(&staging)?;

        let meta_json = serde_json::to_vec_pretty(&entry.meta).expect("meta serializes");
        let writes: [(CommitStep, &str, Option<&[u8]>); 4] = [
            (CommitStep::WriteStdout, STDOUT_FILE, Some(entry.stdout)),
            (CommitStep::WriteStderr, STDERR_FILE, Some(entry.stderr)),
            (CommitStep::WriteResult, RESULT_FILE, entry.result),
            (CommitStep::WriteMeta, META_FILE, Some(&meta_json)),
        ];
        for (step, name, bytes) in writes {
            gate(step)?;
            let Some(bytes) = bytes else { continue };
            let path = staging.join(name);
            if torn(step) {
                fs::write(&path, &bytes[..bytes.len() / 2]).at(&path)?;
                return Err(StoreError::Interrupted(step));
            }
            write_synced(&path, bytes).at(&path)?;
        }

        gate(CommitStep::SyncStaging)?;
        sync_dir(&staging).at(&staging)?;

        let target = self.entry_dir(&key);
        let fanout = target.parent().expect("entry dir has a fan-out parent");
        gate(CommitStep::CreateFanout)?;
        fs::create_dir_all(fanout).at(fanout)?;

        gate(CommitStep::Publish)?;
        if !matches!(existing, Lookup::Miss) || target.exists() {
            // Replace a failed or corrupt entry: move it aside, then publish.
            let trash =
                self.root
                    .join(STAGING_DIR)
                    .join(format!("trash-{}-{}-{seq}", key.to_hex(), std::process::id()));
            match fs::rename(&target, &trash) {
                Ok(()) => {
                    let _ = fs::remove_dir_all(&trash);
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e).at(&target),
            }
        }
        fs::rename(&staging, &target).at(&target)?;

        gate(CommitStep::SyncParent)?;
        sync_dir(fanout).at(fanout)?;
        Ok(committed())
    }

    /// Keys of every published entry, complete or not.
    pub fn keys(&self) -> Result<Vec<TaskKey>, StoreError> {
        let mut keys = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(keys),
            Err(e) => return Err(e).at(&self.root),
        };
        for fanout in entries {
            let fanout = fanout.at(&self.root)?;
            let prefix = fanout.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !fanout.path().is_dir() {
                continue;
            }
            for item in fs::read_dir(fanout.path()).at(&fanout.path())? {
                let item = item.at(&fanout.path())?;
                let name = format!("{prefix}{}", item.file_name().to_string_lossy());
                if let Ok(key) = name.parse::<TaskKey>() {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    /// Removes entries in scope and returns how many were removed. Needs
    /// the writer lock.
    pub fn purge(&self, scope: PurgeScope<'_>) -> Result<usize, StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let mut removed = 0;
        for key in self.keys()? {
            let keep = match &scope {
                PurgeScope::All => false,
                PurgeScope::KeysNotIn(plan) => plan.contains(&key),
            };
            if keep {
                continue;
            }
            let dir = self.entry_dir(&key);
            fs::remove_dir_all(&dir).at(&dir)?;
            removed += 1;
            let fanout = dir.parent().expect("fan-out parent");
            // Only succeeds once the fan-out directory is empty.
            let _ = fs::remove_dir(fanout);
        }
        Ok(removed)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

fn sync_dir(path: &Path) -> io::Result<()> {
    File::open(path)?.sync_all()
}
