//! Append-only run manifest.
//!
//! One JSON object per line. The first line is the header (`"type":
//! "header"`) carrying the run id and config fingerprint. Each invocation
//! against the manifest starts a session line, followed by task records and
//! notification events. A line counts only once its terminating newline is
//! on disk; a torn final line is dropped on load.
//!
//! Within one session a task has at most one terminal record. Across
//! sessions the latest record for a key wins.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ParamValue;
use crate::engine::{TaskResult, TaskStatus};
use crate::expand::{Assignment, TaskPlan};
use crate::identity::TaskKey;
use crate::notify::NotificationEvent;
use crate::store::CheckpointStore;

pub const MANIFEST_FORMAT: u32 = 1;
pub const DEFAULT_RUNS_DIR: &str = ".mxrun/runs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSummary {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: u32,
    pub run_id: String,
    pub config_fingerprint: TaskKey,
    pub created_at_ms: u64,
    pub tool_version: String,
    pub dimensions: Vec<DimensionSummary>,
    pub total: usize,
    pub excluded: usize,
}

impl ManifestHeader {
    pub fn for_plan(run_id: &str, plan: &TaskPlan) -> Self {
        ManifestHeader {
            format: MANIFEST_FORMAT,
            run_id: run_id.to_owned(),
            config_fingerprint: plan.config_fingerprint,
            created_at_ms: crate::time::now_ms(),
            tool_version: crate::TOOL_VERSION.to_owned(),
            dimensions: plan
                .dimensions
                .iter()
                .map(|(name, size)| DimensionSummary {
                    name: name.clone(),
                    size: *size,
                })
                .collect(),
            total: plan.len(),
            excluded: plan.excluded_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Executed,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    #[serde(default)]
    pub session: u32,
    pub key: TaskKey,
    pub ordinal: usize,
    pub params: Vec<(String, serde_json::Value)>,
    pub status: TaskStatus,
    pub provenance: Provenance,
    pub exit_code: Option<i32>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub duration_ms: u64,
    pub attempts: u32,
    pub error_class: Option<String>,
    pub error_message: Option<String>,
    pub stdout_ref: Option<String>,
    pub stderr_ref: Option<String>,
    pub result_ref: Option<String>,
}

impl TaskRecord {
    pub fn from_result(result: &TaskResult, assignment: &Assignment) -> Self {
        let stored = matches!(result.status, TaskStatus::Succeeded | TaskStatus::Restored);
        let blob = |name: &str| stored.then(|| CheckpointStore::blob_ref(&result.key, name));
        TaskRecord {
            session: 0,
            key: result.key,
            ordinal: result.ordinal,
            params: assignment.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            status: result.status,
            provenance: if result.status == TaskStatus::Restored {
                Provenance::Cache
            } else {
                Provenance::Executed
            },
            exit_code: result.exit_code,
            started_at_ms: result.started_at_ms,
            finished_at_ms: result.finished_at_ms,
            duration_ms: result.duration_ms,
            attempts: result.attempts,
            error_class: result.error.as_ref().map(|e| e.class.as_str().to_owned()),
            error_message: result.error.as_ref().map(|e| e.message.clone()),
            stdout_ref: blob("stdout"),
            stderr_ref: blob("stderr"),
            result_ref: if stored && result.payload.is_some() {
                blob("result")
            } else {
                None
            },
        }
    }

    pub fn assignment(&self) -> Assignment {
        Assignment::from_pairs(
            self.params
                .iter()
                .map(|(k, v)| (k.clone(), ParamValue::from_json(v).unwrap_or(ParamValue::Null))),
        )
    }

    pub fn is_success(&self) -> bool {
        matches!(self.status, TaskStatus::Succeeded | TaskStatus::Restored)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub session: u32,
    pub kind: String,
    pub body: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line {
    Header(ManifestHeader),
    Session { session: u32, started_at_ms: u64 },
    Task(TaskRecord),
    Event(EventRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub header: ManifestHeader,
    pub sessions: u32,
    pub records: Vec<TaskRecord>,
    pub events: Vec<EventRecord>,
    /// Problems tolerated while loading, e.g. a torn final line.
    pub warnings: Vec<String>,
    /// Byte length of the complete lines.
    pub valid_len: u64,
}

impl RunManifest {
    pub fn run_id(&self) -> &str {
        &self.header.run_id
    }

    /// Latest record per key, keyed by task key.
    pub fn latest(&self) -> HashMap<TaskKey, &TaskRecord> {
        let mut out = HashMap::new();
        for r in &self.records {
            out.insert(r.key, r);
        }
        out
    }

    /// Latest record per key, ordered by plan ordinal.
    pub fn latest_in_plan_order(&self) -> Vec<&TaskRecord> {
        let mut v: Vec<&TaskRecord> = self.latest().into_values().collect();
        v.sort_by_key(|r| (r.ordinal, r.key));
        v
    }

    pub fn succeeded_keys(&self) -> HashSet<TaskKey> {
        self.latest()
            .into_iter()
            .filter(|(_, r)| r.is_success())
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest {0} has no complete header line")]
    MissingHeader(PathBuf),
    #[error("manifest {path}: line {line} is not a valid record: {message}")]
    CorruptLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest {0} already exists")]
    AlreadyExists(PathBuf),
    #[error("task {0} already has a terminal record in this session")]
    DuplicateRecord(TaskKey),
    #[error("task {0} is not part of the plan")]
    UnknownTask(TaskKey),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn manifest_path(runs_dir: &Path, run_id: &str) -> PathBuf {
    runs_dir.join(format!("{run_id}.manifest"))
}

/// Reads a manifest, dropping a torn final line with a warning.
pub fn load_manifest(path: &Path) -> Result<RunManifest, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    let mut warnings = Vec::new();
    if complete < bytes.len() {
        let msg = format!(
            "{}: dropped torn final line ({} bytes) left by an interrupted write",
            path.display(),
            bytes.len() - complete
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut header = None;
    let mut sessions = 0;
    let mut records = Vec::new();
    let mut events = Vec::new();
    for (i, raw) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if raw.is_empty() {
            continue;
        }
        let line: Line = serde_json::from_slice(raw).map_err(|e| ManifestError::CorruptLine {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match line {
            Line::Header(h) if i == 0 => header = Some(h),
            Line::Header(_) => {
                return Err(ManifestError::CorruptLine {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "second header".into(),
                })
            }
            _ if header.is_none() => return Err(ManifestError::MissingHeader(path.to_owned())),
            Line::Session { session, .. } => sessions = sessions.max(session),
            Line::Task(r) => records.push(r),
            Line::Event(e) => events.push(e),
        }
    }
    let header = header.ok_or_else(|| ManifestError::MissingHeader(path.to_owned()))?;
    Ok(RunManifest {
        header,
        sessions,
        records,
        events,
        warnings,
        valid_len: complete as u64,
    })
}

/// The single writer for one manifest file.
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
    session: u32,
    run_id: String,
    plan_keys: Option<HashSet<TaskKey>>,
    terminal: HashSet<TaskKey>,
}

impl ManifestWriter {
    /// Creates a new manifest and starts session 1.
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self, ManifestError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => ManifestError::AlreadyExists(path.to_owned()),
                _ => io_err(path)(e),
            })?;
        let mut w = ManifestWriter {
            path: path.to_owned(),
            file,
            session: 0,
            run_id: header.run_id.clone(),
            plan_keys: None,
            terminal: HashSet::new(),
        };
        w.write_line(&Line::Header(header.clone()))?;
        w.start_session(1)?;
        Ok(w)
    }

    /// Reopens a loaded manifest for a new session, discarding any torn tail.
    pub fn reopen(path: &Path, loaded: &RunManifest) -> Result<Self, ManifestError> {
        let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        file.set_len(loaded.valid_len).map_err(io_err(path))?;
        file.sync_all().map_err(io_err(path))?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        let mut w = ManifestWriter {
            path: path.to_owned(),
            file,
            session: 0,
            run_id: loaded.header.run_id.clone(),
            plan_keys: None,
            terminal: HashSet::new(),
        };
        w.start_session(loaded.sessions + 1)?;
        Ok(w)
    }

    /// Restricts records to the keys of `plan`.
    pub fn restrict_to(&mut self, plan: &TaskPlan) {
        self.plan_keys = Some(plan.keys().collect());
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn session(&self) -> u32 {
        self.session
    }

    fn start_session(&mut self, session: u32) -> Result<(), ManifestError> {
        self.session = session;
        self.terminal.clear();
        self.write_line(&Line::Session {
            session,
            started_at_ms: crate::time::now_ms(),
        })
    }

    fn write_line(&mut self, line: &Line) -> Result<(), ManifestError> {
        let mut bytes = serde_json::to_vec(line).expect("manifest line serializes");
        bytes.push(b'\n');
        self.file.write_all(&bytes).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    /// Durably appends a terminal task record.
    pub fn append_record(&mut self, record: &TaskRecord) -> Result<(), ManifestError> {
        if let Some(keys) = &self.plan_keys {
            if !keys.contains(&record.key) {
                return Err(ManifestError::UnknownTask(record.key));
            }
        }
        if self.terminal.contains(&record.key) {
            return Err(ManifestError::DuplicateRecord(record.key));
        }
        let mut record = record.clone();
        record.session = self.session;
        self.write_line(&Line::Task(record.clone()))?;
        self.terminal.insert(record.key);
        Ok(())
    }

    pub fn append_event(&mut self, event: &NotificationEvent) -> Result<(), ManifestError> {
        let body = serde_json::from_str(&event.to_json()).expect("event json");
        self.write_line(&Line::Event(EventRecord {
            session: self.session,
            kind: event.kind.as_str().to_owned(),
            body,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigMatrix;
    use crate::expand::expand;

    fn plan(n: i64) -> TaskPlan {
        expand(&ConfigMatrix::new().with_dimension("i", 0..n)).unwrap()
    }

    fn record(plan: &TaskPlan, i: usize, status: TaskStatus) -> TaskRecord {
        let t = &plan.tasks[i];
        TaskRecord {
            session: 0,
            key: t.key,
            ordinal: i,
            params: t.assignment.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            status,
            provenance: Provenance::Executed,
            exit_code: Some(if status == TaskStatus::Failed { 1 } else { 0 }),
            started_at_ms: 1,
            finished_at_ms: 2,
            duration_ms: 1,
            attempts: 1,
            error_class: (status == TaskStatus::Failed).then(|| "nonzero-exit".into()),
            error_message: None,
            stdout_ref: None,
            stderr_ref: None,
            result_ref: None,
        }
    }

    #[test]
    fn append_then_load() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("runs/r.manifest");
        let p = plan(54);
        let mut w = ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)).unwrap();
        w.restrict_to(&p);
        for i in 0..54 {
            w.append_record(&record(&p, i, TaskStatus::Succeeded)).unwrap();
        }
        drop(w);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 54);
        assert!(m.warnings.is_empty());
        assert_eq!(m.header.config_fingerprint, p.config_fingerprint);
        assert_eq!(m.records[3].assignment().get("i"), Some(&ParamValue::Integer(3)));
        assert!(m.records.iter().all(|r| r.session == 1));
    }

    #[test]
    fn duplicate_terminal_record_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("r.manifest");
        let p = plan(2);
        let mut w = ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)).unwrap();
        w.append_record(&record(&p, 0, TaskStatus::Failed)).unwrap();
        assert!(matches!(
            w.append_record(&record(&p, 0, TaskStatus::Succeeded)),
            Err(ManifestError::DuplicateRecord(_))
        ));
        drop(w);
        // a later session may supersede the failure
        let m = load_manifest(&path).unwrap();
        let mut w = ManifestWriter::reopen(&path, &m).unwrap();
        w.append_record(&record(&p, 0, TaskStatus::Succeeded)).unwrap();
        drop(w);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.sessions, 2);
        assert_eq!(m.latest()[&p.tasks[0].key].status, TaskStatus::Succeeded);
        assert_eq!(m.succeeded_keys().len(), 1);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = plan(2);
        let other = plan(3);
        let mut w = ManifestWriter::create(&tmp.path().join("m"), &ManifestHeader::for_plan("r", &p)).unwrap();
        w.restrict_to(&p);
        assert!(matches!(
            w.append_record(&record(&other, 2, TaskStatus::Succeeded)),
            Err(ManifestError::UnknownTask(_))
        ));
    }

    #[test]
    fn empty_file_has_no_header() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("empty.manifest");
        fs::write(&path, b"").unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::MissingHeader(_))));
    }

    #[test]
    fn create_refuses_to_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m");
        let p = plan(1);
        ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)).unwrap();
        assert!(matches!(
            ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)),
            Err(ManifestError::AlreadyExists(_))
        ));
    }

    #[test]
    fn torn_tail_at_every_offset() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("r.manifest");
        let p = plan(20);
        let mut w = ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)).unwrap();
        let mut ends = Vec::new();
        for i in 0..13 {
            w.append_record(&record(&p, i, TaskStatus::Succeeded)).unwrap();
            ends.push(fs::metadata(&path).unwrap().len() as usize);
        }
        drop(w);
        let full = fs::read(&path).unwrap();
        let header_end = full.iter().position(|&b| b == b'\n').unwrap() + 1;
        let cut = tmp.path().join("cut.manifest");
        for offset in 0..=full.len() {
            fs::write(&cut, &full[..offset]).unwrap();
            let loaded = load_manifest(&cut);
            if offset < header_end {
                assert!(
                    matches!(loaded, Err(ManifestError::MissingHeader(_))),
                    "offset {offset}"
                );
                continue;
            }
            let m = loaded.unwrap();
            let complete = ends.iter().filter(|&&e| e <= offset).count();
            assert_eq!(m.records.len(), complete, "offset {offset}");
            let torn = full[..offset].last() != Some(&b'\n');
            assert_eq!(m.warnings.len(), usize::from(torn), "offset {offset}");
        }
        // the 12-complete-records-plus-torn-tail case
        fs::write(&cut, &full[..ends[11] + 10]).unwrap();
        let m = load_manifest(&cut).unwrap();
        assert_eq!((m.records.len(), m.warnings.len()), (12, 1));
        // reopening trims the torn tail so new lines stay parseable
        let mut w = ManifestWriter::reopen(&cut, &m).unwrap();
        w.append_record(&record(&p, 19, TaskStatus::Succeeded)).unwrap();
        drop(w);
        let m = load_manifest(&cut).unwrap();
        assert_eq!((m.records.len(), m.warnings.len()), (13, 0));
    }

    #[test]
    fn round_trip_of_complete_run() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("r.manifest");
        let p = plan(5);
        let mut w = ManifestWriter::create(&path, &ManifestHeader::for_plan("r", &p)).unwrap();
        for i in 0..5 {
            w.append_record(&record(&p, i, TaskStatus::Succeeded)).unwrap();
        }
        drop(w);
        assert_eq!(load_manifest(&path).unwrap(), load_manifest(&path).unwrap());
        let copy = tmp.path().join("copy.manifest");
        fs::copy(&path, &copy).unwrap();
        let (a, b) = (load_manifest(&path).unwrap(), load_manifest(&copy).unwrap());
        assert_eq!(a.records, b.records);
        assert_eq!(a.header, b.header);
    }
}
