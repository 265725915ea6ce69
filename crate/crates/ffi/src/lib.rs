//! C ABI for mxrun.
//!
//! Conventions:
//! - Every fallible function returns an [`MxStatus`]; on failure a message is
//!   available from [`mx_last_error_message`] on the same thread.
//! - Objects are opaque handles created by `*_parse` / `*_expand` / `mx_run_*`
//!   and released with the matching `*_free`. Freeing NULL is a no-op.
//! - Strings passed in are NUL-terminated UTF-8. Strings copied out use the
//!   `(buf, cap, needed)` pattern: `needed` receives the size including the
//!   terminating NUL, and nothing is written when `cap < needed`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use mxrun::config::{self, ConfigFormat, Severity};
use mxrun::engine::{default_concurrency, RunReport};
use mxrun::identity::task_key;
use mxrun::notify::Notifier;
use mxrun::store::LockMode;
use mxrun::{
    Assignment, CheckpointStore, ConfigMatrix, Engine, RunOptions, RunnerSpec, Settings, TaskPlan, TaskStatus,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Expand = 4,
    Store = 5,
    Run = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Terminal state of one task in a report.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxTaskStatus {
    Succeeded = 0,
    Failed = 1,
    Restored = 2,
}

/// Parsed configuration matrix.
pub struct MxConfig(ConfigMatrix);

/// Expanded, ordered task list.
pub struct MxPlan(TaskPlan);

/// Outcome of a run.
pub struct MxReport(RunReport);

/// Read-only view of the task passed to an [`MxTaskFn`].
pub struct MxTask<'a> {
    assignment: &'a Assignment,
    settings: &'a Settings,
    key: String,
}

/// Output buffer passed to an [`MxTaskFn`]; its contents become the payload.
pub struct MxBuffer(Vec<u8>);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MxRunOptions {
    /// Worker count; 0 means the number of logical CPUs.
    pub jobs: u32,
    /// Extra attempts for failed tasks.
    pub retries: u32,
    /// Per-task timeout for command runners; 0 disables it.
    pub timeout_ms: u64,
    pub fail_fast: bool,
    pub cache_failures: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MxCounts {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub restored: usize,
    pub executed: usize,
}

/// Task body. Return 0 for success; any other value marks the task failed.
/// Called concurrently from worker threads, so `user_data` must tolerate
/// shared access. `task` and `payload` are valid only during the call.
pub type MxTaskFn =
    Option<unsafe extern "C" fn(user_data: *mut c_void, task: *const MxTask, payload: *mut MxBuffer) -> i32>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).ok());
}

fn fail(status: MxStatus, message: impl Into<String>) -> MxStatus {
    set_error(message);
    status
}

/// Runs `f`, converting a panic into [`MxStatus::Panic`].
fn guard(f: impl FnOnce() -> MxStatus) -> MxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(MxStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MxStatus> {
    if p.is_null() {
        return Err(fail(MxStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MxStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> MxStatus {
    let len = s.len() + 1;
    if !needed.is_null() {
        *needed = len;
    }
    if buf.is_null() || cap < len {
        return fail(MxStatus::BufferTooSmall, format!("need {len} bytes"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    MxStatus::Ok
}

macro_rules! handle {
    ($p:expr, $what:literal) => {
        match $p.as_ref() {
            Some(h) => h,
            None => return fail(MxStatus::NullArgument, concat!($what, " is NULL")),
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next mxrun call on this thread.
#[no_mangle]
pub extern "C" fn mx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses TOML source into a configuration handle.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_config_parse(source: *const c_char, out: *mut *mut MxConfig) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return fail(MxStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        let text = match str_arg(source, "source") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match config::parse_config(text, ConfigFormat::Toml) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(MxConfig(c)));
                MxStatus::Ok
            }
            Err(e) => fail(MxStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `config` must be NULL or a handle from [`mx_config_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mx_config_free(config: *mut MxConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Validates a configuration. Returns [`MxStatus::Config`] when any error
/// diagnostic exists; the last error message then lists all diagnostics, one
/// per line. Counts are written in both cases (either pointer may be NULL).
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mx_config_validate(
    config: *const MxConfig,
    error_count: *mut usize,
    warning_count: *mut usize,
) -> MxStatus {
    guard(|| {
        let config = handle!(config, "config");
        let diagnostics = config::validate(&config.0);
        let errors = diagnostics.iter().filter(|d| d.severity == Severity::Error).count();
        if !error_count.is_null() {
            *error_count = errors;
        }
        if !warning_count.is_null() {
            *warning_count = diagnostics.len() - errors;
        }
        if errors == 0 {
            return MxStatus::Ok;
        }
        let text: Vec<String> = diagnostics.iter().map(ToString::to_string).collect();
        fail(MxStatus::Config, text.join("\n"))
    })
}

/// Expands a configuration into a plan.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_expand(config: *const MxConfig, out: *mut *mut MxPlan) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return fail(MxStatus::NullArgument, "out is NULL");
        }
        *out = ptr::null_mut();
        let config = handle!(config, "config");
        match mxrun::expand(&config.0) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MxPlan(p)));
                MxStatus::Ok
            }
            Err(e) => fail(MxStatus::Expand, e.to_string()),
        }
    })
}

/// Number of tasks in the plan (0 for NULL).
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_len(plan: *const MxPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.len())
}

/// Number of combinations removed by exclusion rules (0 for NULL).
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_excluded(plan: *const MxPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.excluded_count)
}

/// Writes the 64-character hex key of task `index` plus NUL into `out`,
/// which must hold at least 65 bytes.
///
/// # Safety
/// `plan` must be a live handle; `out` must point to 65 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_task_key(plan: *const MxPlan, index: usize, out: *mut c_char) -> MxStatus {
    guard(|| {
        let plan = handle!(plan, "plan");
        let Some(task) = plan.0.tasks.get(index) else {
            return fail(MxStatus::OutOfRange, format!("task index {index} >= {}", plan.0.len()));
        };
        copy_out(&task.key.to_hex(), out, 65, ptr::null_mut())
    })
}

/// Writes the configuration fingerprint (64 hex chars plus NUL) into `out`.
///
/// # Safety
/// `plan` must be a live handle; `out` must point to 65 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_fingerprint(plan: *const MxPlan, out: *mut c_char) -> MxStatus {
    guard(|| {
        let plan = handle!(plan, "plan");
        copy_out(&plan.0.config_fingerprint.to_hex(), out, 65, ptr::null_mut())
    })
}

/// # Safety
/// `plan` must be NULL or a handle from [`mx_plan_expand`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mx_plan_free(plan: *mut MxPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Defaults: logical-CPU workers, no retries, no timeout, full isolation.
#[no_mangle]
pub extern "C" fn mx_run_options_default() -> MxRunOptions {
    MxRunOptions {
        jobs: 0,
        retries: 0,
        timeout_ms: 0,
        fail_fast: false,
        cache_failures: false,
    }
}

unsafe fn run_with(
    plan: *const MxPlan,
    runner: RunnerSpec,
    cache_dir: *const c_char,
    options: *const MxRunOptions,
    out: *mut *mut MxReport,
) -> MxStatus {
    if out.is_null() {
        return fail(MxStatus::NullArgument, "out is NULL");
    }
    *out = ptr::null_mut();
    let plan = handle!(plan, "plan");
    let cache_dir = match str_arg(cache_dir, "cache_dir") {
        Ok(d) => d,
        Err(s) => return s,
    };
    let opts = options.as_ref().copied().unwrap_or_else(|| mx_run_options_default());
    let runner = runner.with_timeout((opts.timeout_ms > 0).then(|| Duration::from_millis(opts.timeout_ms)));
    let store = match CheckpointStore::open(cache_dir, LockMode::Exclusive) {
        Ok(s) => s,
        Err(e) => return fail(MxStatus::Store, e.to_string()),
    };
    let notifier = Notifier::new();
    let run_options = RunOptions {
        concurrency: if opts.jobs == 0 {
            default_concurrency()
        } else {
            opts.jobs as usize
        },
        fail_fast: opts.fail_fast,
        retries: opts.retries,
        cache_failures: opts.cache_failures,
    };
    match Engine::new(runner, &store, &notifier)
        .options(run_options)
        .run(&plan.0, None)
    {
        Ok(report) => {
            *out = Box::into_raw(Box::new(MxReport(report)));
            MxStatus::Ok
        }
        Err(e) => fail(MxStatus::Run, e.to_string()),
    }
}

/// Runs every task as a shell command rendered from `command` (placeholders
/// `{name}` for dimensions and settings), caching results under `cache_dir`.
/// `options` may be NULL for defaults.
///
/// # Safety
/// Pointers must be valid as documented; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_run_command(
    plan: *const MxPlan,
    command: *const c_char,
    cache_dir: *const c_char,
    options: *const MxRunOptions,
    out: *mut *mut MxReport,
) -> MxStatus {
    guard(|| {
        let command = match str_arg(command, "command") {
            Ok(c) => c,
            Err(s) => return s,
        };
        let runner = match RunnerSpec::command(command) {
            Ok(r) => r,
            Err(e) => return fail(MxStatus::Config, format!("command template: {e}")),
        };
        run_with(plan, runner, cache_dir, options, out)
    })
}

struct CallbackTarget {
    f: unsafe extern "C" fn(*mut c_void, *const MxTask, *mut MxBuffer) -> i32,
    user_data: *mut c_void,
}

// The caller promises `user_data` tolerates use from worker threads.
unsafe impl Send for CallbackTarget {}
unsafe impl Sync for CallbackTarget {}

impl CallbackTarget {
    fn call(&self, task: &MxTask, payload: &mut MxBuffer) -> i32 {
        // SAFETY: the caller of `mx_run_callback` vouched for `f` and `user_data`.
        unsafe { (self.f)(self.user_data, task, payload) }
    }
}

/// Runs every task by calling `callback`. Bytes written to the payload
/// buffer become the cached result.
///
/// # Safety
/// `callback` must be safe to call concurrently with `user_data`; other
/// pointers as for [`mx_run_command`].
#[no_mangle]
pub unsafe extern "C" fn mx_run_callback(
    plan: *const MxPlan,
    callback: MxTaskFn,
    user_data: *mut c_void,
    cache_dir: *const c_char,
    options: *const MxRunOptions,
    out: *mut *mut MxReport,
) -> MxStatus {
    guard(|| {
        let Some(f) = callback else {
            return fail(MxStatus::NullArgument, "callback is NULL");
        };
        let target = CallbackTarget { f, user_data };
        let runner = RunnerSpec::callback(move |assignment, settings| {
            let key = task_key(assignment, settings).map_err(|e| e.to_string())?;
            let task = MxTask {
                assignment,
                settings,
                key: key.to_hex(),
            };
            let mut payload = MxBuffer(Vec::new());
            let rc = target.call(&task, &mut payload);
            if rc == 0 {
                Ok(payload.0)
            } else {
                Err(format!("callback returned {rc}"))
            }
        });
        run_with(plan, runner, cache_dir, options, out)
    })
}

/// Copies the task's hex key (65 bytes with NUL) into `out`.
///
/// # Safety
/// `task` must be the pointer passed to the running callback.
#[no_mangle]
pub unsafe extern "C" fn mx_task_key(task: *const MxTask, out: *mut c_char) -> MxStatus {
    guard(|| {
        let task = handle!(task, "task");
        copy_out(&task.key, out, 65, ptr::null_mut())
    })
}

/// Copies the value of dimension or setting `name` as text. Strings are
/// copied verbatim; numbers and booleans use their canonical spelling.
///
/// # Safety
/// `task` must be the pointer passed to the running callback; see the module
/// docs for `(buf, cap, needed)`.
#[no_mangle]
pub unsafe extern "C" fn mx_task_get(
    task: *const MxTask,
    name: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MxStatus {
    guard(|| {
        let task = handle!(task, "task");
        let name = match str_arg(name, "name") {
            Ok(n) => n,
            Err(s) => return s,
        };
        match task.assignment.get(name).or_else(|| task.settings.get(name)) {
            Some(v) => copy_out(&v.to_string(), buf, cap, needed),
            None => fail(MxStatus::OutOfRange, format!("no parameter or setting named `{name}`")),
        }
    })
}

/// Appends `len` bytes to the payload.
///
/// # Safety
/// `buffer` must be the pointer passed to the running callback; `data` must
/// point to `len` readable bytes (it may be NULL when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn mx_buffer_write(buffer: *mut MxBuffer, data: *const u8, len: usize) -> MxStatus {
    guard(|| {
        let Some(buffer) = buffer.as_mut() else {
            return fail(MxStatus::NullArgument, "buffer is NULL");
        };
        if len == 0 {
            return MxStatus::Ok;
        }
        if data.is_null() {
            return fail(MxStatus::NullArgument, "data is NULL");
        }
        buffer.0.extend_from_slice(std::slice::from_raw_parts(data, len));
        MxStatus::Ok
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_report_counts(report: *const MxReport, out: *mut MxCounts) -> MxStatus {
    guard(|| {
        let report = handle!(report, "report");
        if out.is_null() {
            return fail(MxStatus::NullArgument, "out is NULL");
        }
        let c = &report.0.counts;
        *out = MxCounts {
            total: c.total,
            succeeded: c.succeeded,
            failed: c.failed,
            restored: c.restored,
            executed: c.executed,
        };
        MxStatus::Ok
    })
}

/// Status of task `index` (plan order).
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_report_task_status(
    report: *const MxReport,
    index: usize,
    out: *mut MxTaskStatus,
) -> MxStatus {
    guard(|| {
        let report = handle!(report, "report");
        if out.is_null() {
            return fail(MxStatus::NullArgument, "out is NULL");
        }
        let Some(r) = report.0.results.get(index) else {
            return fail(
                MxStatus::OutOfRange,
                format!("task index {index} >= {}", report.0.results.len()),
            );
        };
        *out = match r.status {
            TaskStatus::Succeeded => MxTaskStatus::Succeeded,
            TaskStatus::Failed => MxTaskStatus::Failed,
            TaskStatus::Restored => MxTaskStatus::Restored,
        };
        MxStatus::Ok
    })
}

/// Borrows the payload of task `index`. `*data` is NULL and `*len` 0 when
/// the task has no payload. The bytes stay valid until the report is freed.
///
/// # Safety
/// `report` must be a live handle; `data` and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mx_report_payload(
    report: *const MxReport,
    index: usize,
    data: *mut *const u8,
    len: *mut usize,
) -> MxStatus {
    guard(|| {
        let report = handle!(report, "report");
        if data.is_null() || len.is_null() {
            return fail(MxStatus::NullArgument, "data or len is NULL");
        }
        let Some(r) = report.0.results.get(index) else {
            return fail(
                MxStatus::OutOfRange,
                format!("task index {index} >= {}", report.0.results.len()),
            );
        };
        match &r.payload {
            Some(p) => {
                *data = p.as_ptr();
                *len = p.len();
            }
            None => {
                *data = ptr::null();
                *len = 0;
            }
        }
        MxStatus::Ok
    })
}

/// # Safety
/// `report` must be NULL or a handle from `mx_run_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mx_report_free(report: *mut MxReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
