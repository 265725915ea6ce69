//! Runs a task plan on a bounded worker pool.
//!
//! The calling thread coordinates: it restores cache hits, feeds a queue in
//! plan order, and serializes every manifest write and notification. Workers
//! pull the next pending task, execute it, and commit successes to the
//! checkpoint store before reporting back, so a manifest record marked
//! succeeded always has a committed checkpoint behind it.

pub(crate) mod process;
pub mod template;

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigMatrix, ParamValue, Settings};
use crate::expand::{Assignment, TaskPlan};
use crate::identity::TaskKey;
use crate::manifest::{ManifestError, ManifestWriter, RunManifest, TaskRecord};
use crate::notify::{EventCounts, EventKind, FailureDetail, NotificationEvent, Notifier};
use crate::store::{CheckpointStore, Lookup};
use crate::time::now_ms;

pub use template::{CommandTemplate, TemplateError};

pub const TASK_KEY_ENV: &str = "MXRUN_TASK_KEY";

/// `MXRUN_P_` / `MXRUN_S_` plus the name uppercased, with every
/// non-alphanumeric character replaced by `_`.
pub fn env_var_name(prefix: &str, name: &str) -> String {
    let mut out = String::with_capacity(prefix.len() + name.len());
    out.push_str(prefix);
    out.extend(name.chars().map(|c| {
        if c.is_ascii_alphanumeric() {
            c.to_ascii_uppercase()
        } else {
            '_'
        }
    }));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    #[serde(rename = "succeeded")]
    Succeeded,
    #[serde(rename = "failed")]
    Failed,
    #[serde(rename = "restored-from-cache")]
    Restored,
}

impl TaskStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskStatus::Succeeded => "succeeded",
            TaskStatus::Failed => "failed",
            TaskStatus::Restored => "restored-from-cache",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    SpawnError,
    Timeout,
    NonzeroExit,
    Signal,
    StoreError,
    CallbackError,
    Panic,
    Cancelled,
}

impl ErrorClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorClass::SpawnError => "spawn-error",
            ErrorClass::Timeout => "timeout",
            ErrorClass::NonzeroExit => "nonzero-exit",
            ErrorClass::Signal => "signal",
            ErrorClass::StoreError => "store-error",
            ErrorClass::CallbackError => "callback-error",
            ErrorClass::Panic => "panic",
            ErrorClass::Cancelled => "cancelled",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskError {
    pub class: ErrorClass,
    pub message: String,
}

impl TaskError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        TaskError {
            class,
            message: message.into(),
        }
    }
}

/// Outcome of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskResult {
    pub key: TaskKey,
    pub ordinal: usize,
    pub status: TaskStatus,
    pub exit_code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub payload: Option<Vec<u8>>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub duration_ms: u64,
    pub error: Option<TaskError>,
    /// Executions performed for this result; 0 when restored or cancelled.
    pub attempts: u32,
}

impl TaskResult {
    fn failed(task: &Task<'_>, error: TaskError, started_at_ms: u64, elapsed: Duration) -> Self {
        TaskResult {
            key: task.key,
            ordinal: task.ordinal,
            status: TaskStatus::Failed,
            exit_code: None,
            stdout: Vec::new(),
            stderr: Vec::new(),
            payload: None,
            started_at_ms,
            finished_at_ms: started_at_ms + elapsed.as_millis() as u64,
            duration_ms: elapsed.as_millis() as u64,
            error: Some(error),
            attempts: 1,
        }
    }

    fn restored(task: &Task<'_>, lookup: Option<crate::store::CheckpointEntry>) -> Self {
        let now = now_ms();
        let (exit_code, stdout, stderr, payload) = match lookup {
            Some(e) => (e.meta.exit_code, e.stdout, e.stderr, e.result),
            None => (None, Vec::new(), Vec::new(), None),
        };
        TaskResult {
            key: task.key,
            ordinal: task.ordinal,
            status: TaskStatus::Restored,
            exit_code,
            stdout,
            stderr,
            payload,
            started_at_ms: now,
            finished_at_ms: now,
            duration_ms: 0,
            error: None,
            attempts: 0,
        }
    }

    fn cancelled(task: &Task<'_>) -> Self {
        let mut r = Self::failed(
            task,
            TaskError::new(
                ErrorClass::Cancelled,
                "not started: run stopped after a failure (--fail-fast)",
            ),
            now_ms(),
            Duration::ZERO,
        );
        r.attempts = 0;
        r
    }
}

/// One task as handed to a runner.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub key: TaskKey,
    pub assignment: &'a Assignment,
    pub settings: &'a Settings,
    pub ordinal: usize,
}

impl<'a> Task<'a> {
    pub fn from_plan(plan: &'a TaskPlan, ordinal: usize) -> Self {
        let t = &plan.tasks[ordinal];
        Task {
            key: t.key,
            assignment: &t.assignment,
            settings: &plan.settings,
            ordinal,
        }
    }

    fn value(&self, name: &str) -> Option<&ParamValue> {
        self.assignment.get(name).or_else(|| self.settings.get(name))
    }
}

/// In-process experiment function: gets the assignment and settings,
/// returns the result payload or an error message.
pub type Callback = Arc<dyn Fn(&Assignment, &Settings) -> Result<Vec<u8>, String> + Send + Sync>;

#[derive(Clone)]
pub enum RunnerKind {
    Command(CommandTemplate),
    Callback(Callback),
}

impl fmt::Debug for RunnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunnerKind::Command(t) => f.debug_tuple("Command").field(&t.as_str()).finish(),
            RunnerKind::Callback(_) => f.write_str("Callback"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunnerSpec {
    pub kind: RunnerKind,
    /// Applies to command runners; callbacks cannot be interrupted.
    pub timeout: Option<Duration>,
}

impl RunnerSpec {
    pub fn command(template: &str) -> Result<Self, TemplateError> {
        Ok(RunnerSpec {
            kind: RunnerKind::Command(CommandTemplate::parse(template)?),
            timeout: None,
        })
    }

    pub fn callback<F>(f: F) -> Self
    where
        F: Fn(&Assignment, &Settings) -> Result<Vec<u8>, String> + Send + Sync + 'static,
    {
        RunnerSpec {
            kind: RunnerKind::Callback(Arc::new(f)),
            timeout: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    /// Runner from a config's `[runner]` table.
    pub fn from_config(config: &ConfigMatrix) -> Option<Result<Self, TemplateError>> {
        config
            .runner
            .as_ref()
            .map(|r| Ok(Self::command(&r.command)?.with_timeout(r.timeout_ms.map(Duration::from_millis))))
    }

    fn unknown_placeholder(&self, plan: &TaskPlan) -> Option<String> {
        let RunnerKind::Command(t) = &self.kind else {
            return None;
        };
        t.placeholders()
            .find(|name| !plan.dimensions.iter().any(|(d, _)| d == name) && !plan.settings.contains_key(*name))
            .map(str::to_owned)
    }
}

/// Environment exported to a command task.
pub fn task_environment(task: &Task<'_>) -> Vec<(String, String)> {
    let mut env = vec![(TASK_KEY_ENV.to_owned(), task.key.to_hex())];
    env.extend(
        task.assignment
            .iter()
            .map(|(k, v)| (env_var_name("MXRUN_P_", k), v.to_string())),
    );
    env.extend(
        task.settings
            .iter()
            .map(|(k, v)| (env_var_name("MXRUN_S_", k), v.to_string())),
    );
    env
}

/// Executes one task. Every failure is captured in the result.
pub fn execute_task(task: &Task<'_>, runner: &RunnerSpec) -> TaskResult {
    let started_at_ms = now_ms();
    let clock = Instant::now();
    match &runner.kind {
        RunnerKind::Command(template) => {
            let line = match template.render(|name| task.value(name).map(ToString::to_string)) {
                Ok(line) => line,
                Err(name) => {
                    return TaskResult::failed(
                        task,
                        TaskError::new(
                            ErrorClass::SpawnError,
                            format!("template placeholder `{name}` is undefined"),
                        ),
                        started_at_ms,
                        clock.elapsed(),
                    )
                }
            };
            let outcome = match process::run_shell(&line, &task_environment(task), runner.timeout) {
                Ok(o) => o,
                Err(e) => {
                    return TaskResult::failed(
                        task,
                        TaskError::new(ErrorClass::SpawnError, format!("could not run `{line}`: {e}")),
                        started_at_ms,
                        clock.elapsed(),
                    )
                }
            };
            let elapsed = clock.elapsed();
            let exit_code = outcome.exit_code();
            let error = if outcome.timed_out {
                Some(TaskError::new(
                    ErrorClass::Timeout,
                    format!(
                        "killed after {} ms timeout",
                        runner.timeout.unwrap_or_default().as_millis()
                    ),
                ))
            } else if let Some(sig) = outcome.signal() {
                Some(TaskError::new(
                    ErrorClass::Signal,
                    format!("terminated by signal {sig}"),
                ))
            } else if exit_code != Some(0) {
                Some(TaskError::new(
                    ErrorClass::NonzeroExit,
                    format!("exited with status {}", exit_code.map_or("?".into(), |c| c.to_string())),
                ))
            } else {
                None
            };
            let status = if error.is_none() {
                TaskStatus::Succeeded
            } else {
                TaskStatus::Failed
            };
            let payload = match (&error, outcome.result_file) {
                (Some(_), _) => None,
                (None, Some(file)) => Some(file),
                (None, None) => Some(outcome.stdout.clone()),
            };
            TaskResult {
                key: task.key,
                ordinal: task.ordinal,
                status,
                exit_code,
                stdout: outcome.stdout,
                stderr: outcome.stderr,
                payload,
                started_at_ms,
                finished_at_ms: started_at_ms + elapsed.as_millis() as u64,
                duration_ms: elapsed.as_millis() as u64,
                error,
                attempts: 1,
            }
        }
        RunnerKind::Callback(f) => {
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| f(task.assignment, task.settings)));
            let elapsed = clock.elapsed();
            let (status, payload, error) = match outcome {
                Ok(Ok(payload)) => (TaskStatus::Succeeded, Some(payload), None),
                Ok(Err(msg)) => (
                    TaskStatus::Failed,
                    None,
                    Some(TaskError::new(ErrorClass::CallbackError, msg)),
                ),
                Err(p) => {
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "callback panicked".into());
                    (TaskStatus::Failed, None, Some(TaskError::new(ErrorClass::Panic, msg)))
                }
            };
            TaskResult {
                key: task.key,
                ordinal: task.ordinal,
                status,
                exit_code: None,
                stdout: Vec::new(),
                stderr: Vec::new(),
                payload,
                started_at_ms,
                finished_at_ms: started_at_ms + elapsed.as_millis() as u64,
                duration_ms: elapsed.as_millis() as u64,
                error,
                attempts: 1,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub concurrency: usize,
    pub fail_fast: bool,
    /// Extra attempts for a failed task within the same run.
    pub retries: u32,
    /// Also commit failed results to the store (forensics only; they are
    /// never restored).
    pub cache_failures: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            concurrency: default_concurrency(),
            fail_fast: false,
            retries: 0,
            cache_failures: false,
        }
    }
}

pub fn default_concurrency() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunCounts {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub restored: usize,
    /// Tasks whose command or callback actually ran in this invocation.
    pub executed: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_id: String,
    pub counts: RunCounts,
    pub wall_time: Duration,
    /// In plan order.
    pub results: Vec<TaskResult>,
    pub delivery_failures: usize,
}

impl RunReport {
    pub fn all_succeeded(&self) -> bool {
        self.counts.failed == 0
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the plan has no tasks")]
    EmptyPlan,
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
    #[error("checkpoint store is not open for writing")]
    StoreUnavailable,
    #[error("runner template placeholder `{{{0}}}` names no dimension or setting")]
    UnknownPlaceholder(String),
    #[error("manifest was written for config {manifest} but the current plan is {plan}; the configuration changed, so task keys differ (start a fresh run)")]
    FingerprintMismatch { manifest: TaskKey, plan: TaskKey },
    #[error("run aborted: {0}")]
    Manifest(#[from] ManifestError),
}

pub struct Engine<'a> {
    runner: RunnerSpec,
    store: &'a CheckpointStore,
    notifier: &'a Notifier,
    options: RunOptions,
}

struct Tally {
    counts: EventCounts,
    executed: usize,
}

impl Tally {
    fn add(&mut self, r: &TaskResult) {
        self.counts.pending -= 1;
        match r.status {
            TaskStatus::Succeeded => self.counts.succeeded += 1,
            TaskStatus::Failed => self.counts.failed += 1,
            TaskStatus::Restored => self.counts.restored += 1,
        }
        if r.attempts > 0 {
            self.executed += 1;
        }
    }
}

impl<'a> Engine<'a> {
    pub fn new(runner: RunnerSpec, store: &'a CheckpointStore, notifier: &'a Notifier) -> Self {
        Engine {
            runner,
            store,
            notifier,
            options: RunOptions::default(),
        }
    }

    pub fn options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    pub fn concurrency(mut self, n: usize) -> Self {
        self.options.concurrency = n;
        self
    }

    /// Runs every task of `plan`, restoring cache hits.
    pub fn run(&self, plan: &TaskPlan, manifest: Option<&mut ManifestWriter>) -> Result<RunReport, EngineError> {
        self.run_inner(plan, &HashSet::new(), manifest)
    }

    /// Continues an interrupted run: tasks the manifest recorded as
    /// succeeded, or found in the cache, are restored; everything else runs.
    pub fn resume(
        &self,
        prior: &RunManifest,
        plan: &TaskPlan,
        manifest: Option<&mut ManifestWriter>,
    ) -> Result<RunReport, EngineError> {
        if prior.header.config_fingerprint != plan.config_fingerprint {
            return Err(EngineError::FingerprintMismatch {
                manifest: prior.header.config_fingerprint,
                plan: plan.config_fingerprint,
            });
        }
        self.run_inner(plan, &prior.succeeded_keys(), manifest)
    }

    fn run_inner(
        &self,
        plan: &TaskPlan,
        done_before: &HashSet<TaskKey>,
        mut manifest: Option<&mut ManifestWriter>,
    ) -> Result<RunReport, EngineError> {
        if plan.is_empty() {
            return Err(EngineError::EmptyPlan);
        }
        if self.options.concurrency == 0 {
            return Err(EngineError::ZeroConcurrency);
        }
        if !self.store.is_writable() {
            return Err(EngineError::StoreUnavailable);
        }
        if let Some(name) = self.runner.unknown_placeholder(plan) {
            return Err(EngineError::UnknownPlaceholder(name));
        }
        if let Some(m) = manifest.as_deref_mut() {
            m.restrict_to(plan);
        }

        let clock = Instant::now();
        let run_id = manifest
            .as_deref()
            .map(|m| m.run_id().to_owned())
            .unwrap_or_else(|| format!("{}-{}", &plan.config_fingerprint.to_hex()[..12], now_ms()));
        let mut tally = Tally {
            counts: EventCounts {
                total: plan.len(),
                pending: plan.len(),
                ..EventCounts::default()
            },
            executed: 0,
        };
        let mut delivery_failures = 0;
        let mut emit =
            |kind: EventKind, tally: &Tally, detail: Option<FailureDetail>, m: Option<&mut ManifestWriter>| {
                let event = NotificationEvent {
                    kind,
                    run_id: run_id.clone(),
                    counts: tally.counts,
                    timestamp_ms: now_ms(),
                    detail,
                };
                if let Some(m) = m {
                    if let Err(e) = m.append_event(&event) {
                        log::warn!("could not log {} event: {e}", kind.as_str());
                    }
                }
                delivery_failures += self
                    .notifier
                    .notify(&event)
                    .iter()
                    .filter(|s| !matches!(s, crate::notify::DeliveryStatus::Delivered))
                    .count();
            };

        emit(EventKind::RunStarted, &tally, None, manifest.as_deref_mut());

        let mut results: Vec<Option<TaskResult>> = vec![None; plan.len()];
        let mut queue = VecDeque::new();
        for ordinal in 0..plan.len() {
            let task = Task::from_plan(plan, ordinal);
            let hit = match self.store.lookup(&task.key) {
                Lookup::Hit(e) => Some(e),
                Lookup::Corrupt(why) => {
                    log::warn!("ignoring corrupt checkpoint for task {}: {why}", task.key);
                    None
                }
                Lookup::Miss => None,
            };
            let hit = hit.and_then(|e| Lookup::Hit(e).success());
            if hit.is_some() || done_before.contains(&task.key) {
                let r = TaskResult::restored(&task, hit);
                if let Some(m) = manifest.as_deref_mut() {
                    m.append_record(&TaskRecord::from_result(&r, task.assignment))?;
                }
                tally.add(&r);
                results[ordinal] = Some(r);
            } else {
                queue.push_back(ordinal);
            }
        }

        let stop = AtomicBool::new(false);
        let workers = self.options.concurrency.min(queue.len());
        let queue = Mutex::new(queue);
        let mut abort: Option<ManifestError> = None;

        thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<TaskResult>();
            for _ in 0..workers {
                let tx = tx.clone();
                let (queue, stop) = (&queue, &stop);
                let fail_fast = self.options.fail_fast;
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Some(ordinal) = queue.lock().unwrap_or_else(|p| p.into_inner()).pop_front() else {
                        break;
                    };
                    let result = self.execute_and_persist(&Task::from_plan(plan, ordinal));
                    if fail_fast && result.status == TaskStatus::Failed {
                        stop.store(true, Ordering::SeqCst);
                    }
                    if tx.send(result).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            for result in rx {
                let task = Task::from_plan(plan, result.ordinal);
                if abort.is_none() {
                    if let Some(m) = manifest.as_deref_mut() {
                        if let Err(e) = m.append_record(&TaskRecord::from_result(&result, task.assignment)) {
                            stop.store(true, Ordering::SeqCst);
                            abort = Some(e);
                        }
                    }
                }
                tally.add(&result);
                if result.status == TaskStatus::Failed {
                    if self.options.fail_fast {
                        stop.store(true, Ordering::SeqCst);
                    }
                    let detail = FailureDetail {
                        task_key: result.key,
                        error_class: result.error.as_ref().map_or("unknown", |e| e.class.as_str()).to_owned(),
                    };
                    let m = if abort.is_none() { manifest.as_deref_mut() } else { None };
                    emit(EventKind::TaskFailed, &tally, Some(detail), m);
                }
                let ordinal = result.ordinal;
                results[ordinal] = Some(result);
            }
        });

        if let Some(e) = abort {
            return Err(EngineError::Manifest(e));
        }

        // Anything still queued was skipped by fail-fast.
        for ordinal in queue.into_inner().unwrap_or_else(|p| p.into_inner()) {
            let task = Task::from_plan(plan, ordinal);
            let r = TaskResult::cancelled(&task);
            if let Some(m) = manifest.as_deref_mut() {
                m.append_record(&TaskRecord::from_result(&r, task.assignment))?;
            }
            tally.add(&r);
            let detail = FailureDetail {
                task_key: r.key,
                error_class: ErrorClass::Cancelled.as_str().to_owned(),
            };
            emit(EventKind::TaskFailed, &tally, Some(detail), manifest.as_deref_mut());
            results[ordinal] = Some(r);
        }

        emit(EventKind::RunCompleted, &tally, None, manifest);

        let results: Vec<TaskResult> = results
            .into_iter()
            .map(|r| r.expect("every task reaches a terminal status"))
            .collect();
        Ok(RunReport {
            run_id,
            counts: RunCounts {
                total: tally.counts.total,
                succeeded: tally.counts.succeeded,
                failed: tally.counts.failed,
                restored: tally.counts.restored,
                executed: tally.executed,
            },
            wall_time: clock.elapsed(),
            results,
            delivery_failures,
        })
    }

    /// Worker side: execute with retries, then commit a success before the
    /// coordinator may mark the task complete.
    fn execute_and_persist(&self, task: &Task<'_>) -> TaskResult {
        let mut attempts = 0;
        let mut result = loop {
            attempts += 1;
            let r = execute_task(task, &self.runner);
            if r.status == TaskStatus::Succeeded || attempts > self.options.retries {
                break r;
            }
            log::info!("task {} failed on attempt {attempts}; retrying", task.key);
        };
        result.attempts = attempts;
        match result.status {
            TaskStatus::Succeeded => {
                if let Err(e) = self.store.store(&result, false) {
                    result.status = TaskStatus::Failed;
                    result.payload = None;
                    result.error = Some(TaskError::new(ErrorClass::StoreError, e.to_string()));
                }
            }
            TaskStatus::Failed if self.options.cache_failures => {
                if let Err(e) = self.store.store(&result, true) {
                    log::warn!("could not cache failed task {}: {e}", task.key);
                }
            }
            _ => {}
        }
        result
    }
}
