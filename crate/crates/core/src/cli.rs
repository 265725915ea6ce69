//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 the run finished but at least one task failed
//! (or an export is missing payloads), 2 configuration or usage error,
//! 3 environment error (cache, manifest or output I/O).

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::config::{self, ConfigFormat, ConfigMatrix};
use crate::engine::{self, Engine, RunOptions, RunReport, RunnerSpec};
use crate::expand::{self, TaskPlan};
use crate::manifest::{self, load_manifest, ManifestError, ManifestHeader, ManifestWriter};
use crate::notify::{Notifier, SinkSpec};
use crate::report::{export_results, ExportFormat};
use crate::store::{CheckpointStore, LockMode, PurgeScope, StoreError, DEFAULT_CACHE_DIR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASKS_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENVIRONMENT: i32 = 3;

const DEFAULT_STATE_DIR: &str = ".mxrun";

#[derive(Debug, Parser)]
#[command(
    name = "mxrun",
    version,
    about = "Run experiment matrices with caching and resumption"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration file and print diagnostics.
    Validate { config: PathBuf },
    /// Print one line per task: `<task-key>  <dim>=<value> ...`.
    Expand { config: PathBuf },
    /// Expand, execute and export a configuration matrix.
    Run(RunArgs),
    /// Re-export results from an existing run manifest.
    Report(ReportArgs),
    /// Remove cached checkpoints.
    Clean(CleanArgs),
}

#[derive(Debug, Args)]
struct CacheArgs {
    /// Checkpoint cache root.
    #[arg(long, env = "MXRUN_CACHE_DIR", default_value = DEFAULT_CACHE_DIR)]
    cache_dir: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    config: PathBuf,
    /// Worker count (default: logical CPUs).
    #[arg(long, short = 'j', value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
    #[command(flatten)]
    cache: CacheArgs,
    /// Directory for run manifests and exports.
    #[arg(long, default_value = DEFAULT_STATE_DIR)]
    state_dir: PathBuf,
    /// console | file:<path> | webhook:<url>; repeatable.
    #[arg(long, value_name = "SPEC")]
    notify: Vec<SinkSpec>,
    /// Stop dispatching new tasks after the first failure.
    #[arg(long)]
    fail_fast: bool,
    /// Resume or create this run (default: derived from the config).
    #[arg(long)]
    run_id: Option<String>,
    /// Start a new run instead of resuming.
    #[arg(long)]
    fresh: bool,
    /// Export path (default: <state-dir>/runs/<run-id>.<csv|jsonl>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ExportFormat,
    /// Command template overriding `[runner].command`.
    #[arg(long)]
    command: Option<String>,
    /// Per-task timeout overriding `[runner].timeout_ms`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    timeout_ms: Option<u64>,
    /// Extra attempts for failed tasks within this run.
    #[arg(long, default_value_t = 0)]
    retries: u32,
    /// Also store failed results in the cache for inspection.
    #[arg(long)]
    cache_failures: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["run_id", "manifest"])))]
struct ReportArgs {
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    cache: CacheArgs,
    #[arg(long, default_value = DEFAULT_STATE_DIR)]
    state_dir: PathBuf,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ExportFormat,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("scope").required(true).args(["all", "keep_config"])))]
struct CleanArgs {
    /// Remove every entry.
    #[arg(long)]
    all: bool,
    /// Remove entries whose keys are not in this config's plan.
    #[arg(long = "keep-config", value_name = "CONFIG")]
    keep_config: Option<PathBuf>,
    #[command(flatten)]
    cache: CacheArgs,
}

/// A failure that ends the command with `code`.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn env(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_ENVIRONMENT,
            message: message.into(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::env(e.to_string())
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Failure::env(e.to_string())
    }
}

/// Routes `log` output to stderr as `mxrun: <level>: <message>`.
/// `MXRUN_LOG` sets the filter (default `warn`).
pub fn init_logging() {
    let _ = env_logger::Builder::new()
        .parse_env(env_logger::Env::new().filter_or("MXRUN_LOG", "warn"))
        .format(|buf, record| {
            let level = match record.level() {
                log::Level::Error => "error",
                log::Level::Warn => "warning",
                log::Level::Info => "info",
                log::Level::Debug => "debug",
                log::Level::Trace => "trace",
            };
            writeln!(buf, "mxrun: {level}: {}", record.args())
        })
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Expand { config } => cmd_expand(&config),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Clean(args) => cmd_clean(args),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("mxrun: error: {}", f.message);
            f.code
        }
    }
}

fn load_config(path: &Path) -> Result<ConfigMatrix, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    config::parse_config(&text, ConfigFormat::Toml).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Prints diagnostics; fails if any is an error.
fn check(config: &ConfigMatrix, path: &Path) -> Result<(), Failure> {
    let diagnostics = config::validate(config);
    for d in &diagnostics {
        eprintln!("mxrun: {d}");
    }
    let errors = diagnostics.iter().filter(|d| d.is_error()).count();
    if errors > 0 {
        return Err(Failure::usage(format!(
            "{}: {errors} configuration error(s)",
            path.display()
        )));
    }
    Ok(())
}

fn load_plan(path: &Path) -> Result<(ConfigMatrix, TaskPlan), Failure> {
    let config = load_config(path)?;
    check(&config, path)?;
    let plan = expand::expand(&config).map_err(|e| Failure::usage(e.to_string()))?;
    Ok((config, plan))
}

fn cmd_validate(path: &Path) -> Result<i32, Failure> {
    let config = load_config(path)?;
    check(&config, path)?;
    let count = expand::count_tasks(&config);
    println!(
        "ok: {} dimensions, {} combinations, {} excluded, {} tasks",
        config.parameters.len(),
        count.total,
        count.excluded,
        count.included()
    );
    Ok(EXIT_OK)
}

fn cmd_expand(path: &Path) -> Result<i32, Failure> {
    let (_, plan) = load_plan(path)?;
    let stdout = io::stdout();
    let mut out = io::BufWriter::new(stdout.lock());
    for task in &plan.tasks {
        if writeln!(out, "{}  {}", task.key, task.assignment).is_err() {
            break;
        }
    }
    let _ = out.flush();
    Ok(EXIT_OK)
}

fn cmd_run(args: RunArgs) -> Result<i32, Failure> {
    let (config, plan) = load_plan(&args.config)?;
    if plan.is_empty() {
        return Err(Failure::usage("every combination is excluded; nothing to run"));
    }
    let mut runner = match (&args.command, RunnerSpec::from_config(&config)) {
        (Some(cmd), config_runner) => {
            let timeout = config_runner.and_then(Result::ok).and_then(|r| r.timeout);
            RunnerSpec::command(cmd)
                .map_err(|e| Failure::usage(format!("--command: {e}")))?
                .with_timeout(timeout)
        }
        (None, Some(r)) => r.map_err(|e| Failure::usage(format!("[runner].command: {e}")))?,
        (None, None) => return Err(Failure::usage("no command: add a [runner] table or pass --command")),
    };
    if let Some(ms) = args.timeout_ms {
        runner = runner.with_timeout(Some(Duration::from_millis(ms)));
    }

    let notifier = Notifier::new();
    for spec in &args.notify {
        notifier.add(spec.build().map_err(|e| Failure::usage(e.to_string()))?);
    }

    let store = CheckpointStore::open(&args.cache.cache_dir, LockMode::Exclusive)?;

    let fingerprint = plan.config_fingerprint.to_hex();
    let run_id = match (&args.run_id, args.fresh) {
        (Some(id), _) => id.clone(),
        (None, false) => fingerprint[..16].to_owned(),
        (None, true) => format!("{}-{}", &fingerprint[..16], crate::time::now_ms()),
    };
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
        return Err(Failure::usage(format!("invalid run id `{run_id}`")));
    }
    let runs_dir = args.state_dir.join("runs");
    let manifest_path = manifest::manifest_path(&runs_dir, &run_id);
    if args.fresh && manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Failure::env(format!("{}: {e}", manifest_path.display())))?;
    }

    let options = RunOptions {
        concurrency: args.jobs.map_or_else(engine::default_concurrency, |j| j as usize),
        fail_fast: args.fail_fast,
        retries: args.retries,
        cache_failures: args.cache_failures,
    };
    let engine = Engine::new(runner, &store, &notifier).options(options);

    let prior = match load_manifest(&manifest_path) {
        Ok(m) => Some(m),
        Err(ManifestError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => None,
        // Crashed before the header was complete: nothing to resume.
        Err(ManifestError::MissingHeader(_)) => {
            fs::remove_file(&manifest_path).map_err(|e| Failure::env(format!("{}: {e}", manifest_path.display())))?;
            None
        }
        Err(e) => return Err(e.into()),
    };
    let report = match prior {
        Some(prior) => {
            if prior.header.config_fingerprint != plan.config_fingerprint {
                return Err(Failure::usage(format!(
                    "run {run_id} was started from a different configuration (fingerprint {} vs {}); \
                     task keys differ, so it cannot be resumed. Use --fresh or another --run-id",
                    prior.header.config_fingerprint, plan.config_fingerprint
                )));
            }
            let mut writer = ManifestWriter::reopen(&manifest_path, &prior)?;
            engine.resume(&prior, &plan, Some(&mut writer))
        }
        None => {
            let mut writer = ManifestWriter::create(&manifest_path, &ManifestHeader::for_plan(&run_id, &plan))?;
            engine.run(&plan, Some(&mut writer))
        }
    }
    .map_err(|e| match e {
        engine::EngineError::Manifest(_) | engine::EngineError::StoreUnavailable => Failure::env(e.to_string()),
        other => Failure::usage(other.to_string()),
    })?;

    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| runs_dir.join(format!("{run_id}.{}", args.format.extension())));
    let manifest = load_manifest(&manifest_path)?;
    let export = write_export(&manifest, Some(&store), args.format, &out_path)?;

    print_summary(&report);
    println!("results: {}", out_path.display());
    if report.counts.failed > 0 || export.degraded() {
        Ok(EXIT_TASKS_FAILED)
    } else {
        Ok(EXIT_OK)
    }
}

fn write_export(
    manifest: &manifest::RunManifest,
    store: Option<&CheckpointStore>,
    format: ExportFormat,
    path: &Path,
) -> Result<crate::report::ExportSummary, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::env(format!("{}: {e}", dir.display())))?;
    }
    let file = File::create(path).map_err(|e| Failure::env(format!("{}: {e}", path.display())))?;
    let summary = export_results(manifest, store, format, file).map_err(|e| Failure::env(e.to_string()))?;
    if summary.degraded() {
        log::warn!(
            "{} succeeded task(s) have no readable checkpoint",
            summary.missing_payloads
        );
    }
    Ok(summary)
}

fn print_summary(report: &RunReport) {
    let c = &report.counts;
    let color = io::stdout().is_terminal() && std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty());
    let paint = |text: String, code: &str| {
        if color {
            format!("\x1b[{code}m{text}\x1b[0m")
        } else {
            text
        }
    };
    let failed = format!("{} failed", c.failed);
    let failed = if c.failed > 0 { paint(failed, "31") } else { failed };
    println!(
        "run {}: {} tasks, {} executed, {} succeeded, {failed}, {} restored in {:.2}s",
        report.run_id,
        c.total,
        c.executed,
        paint(c.succeeded.to_string(), "32"),
        c.restored,
        report.wall_time.as_secs_f64()
    );
}

fn cmd_report(args: ReportArgs) -> Result<i32, Failure> {
    let path = match (&args.manifest, &args.run_id) {
        (Some(p), _) => p.clone(),
        (None, Some(id)) => manifest::manifest_path(&args.state_dir.join("runs"), id),
        (None, None) => unreachable!("clap enforces one source"),
    };
    let manifest = load_manifest(&path).map_err(|e| match e {
        ManifestError::Io { ref source, .. } if source.kind() == io::ErrorKind::NotFound => {
            Failure::usage(e.to_string())
        }
        other => other.into(),
    })?;
    let store = match CheckpointStore::open(&args.cache.cache_dir, LockMode::ReadOnly) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("{e}; payloads will be reported missing");
            None
        }
    };
    let summary = match &args.out {
        Some(out) => write_export(&manifest, store.as_ref(), args.format, out)?,
        None => {
            let stdout = io::stdout();
            export_results(&manifest, store.as_ref(), args.format, stdout.lock())
                .map_err(|e| Failure::env(e.to_string()))?
        }
    };
    let failed = manifest
        .latest()
        .values()
        .filter(|r| r.status == engine::TaskStatus::Failed)
        .count();
    Ok(if failed > 0 || summary.degraded() {
        EXIT_TASKS_FAILED
    } else {
        EXIT_OK
    })
}

fn cmd_clean(args: CleanArgs) -> Result<i32, Failure> {
    let keep: Option<HashSet<_>> = match &args.keep_config {
        Some(path) => Some(load_plan(path)?.1.keys().collect()),
        None => None,
    };
    let store = CheckpointStore::open(&args.cache.cache_dir, LockMode::TryExclusive)?;
    let scope = match &keep {
        Some(keys) => PurgeScope::KeysNotIn(keys),
        None => PurgeScope::All,
    };
    let removed = store.purge(scope)?;
    println!("removed {removed} cache entries");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        for args in [
            &["mxrun", "run", "x.toml", "--bogus"][..],
            &["mxrun"],
            &["mxrun", "run", "x.toml", "--notify", "email:me"],
            &["mxrun", "run", "x.toml", "--jobs", "0"],
            &["mxrun", "clean"],
        ] {
            let err = Cli::try_parse_from(args).unwrap_err();
            assert!(err.use_stderr(), "{args:?}");
        }
    }

    #[test]
    fn missing_config_is_usage_error() {
        let err = cmd_validate(Path::new("/nonexistent/mx.toml")).unwrap_err();
        assert_eq!(err.code, EXIT_USAGE);
        assert!(err.message.contains("cannot read"));
    }
}
