//! Run lifecycle notifications.
//!
//! Three event kinds exist: `run-started`, `task-failed` (one per failed
//! task) and `run-completed`. Sinks receive them in order from the run's
//! coordinator thread. Delivery failures are logged and reported back but
//! never affect the run.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::identity::TaskKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    RunStarted,
    TaskFailed,
    RunCompleted,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::RunStarted => "run-started",
            EventKind::TaskFailed => "task-failed",
            EventKind::RunCompleted => "run-completed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EventCounts {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub restored: usize,
    pub pending: usize,
}

impl EventCounts {
    pub fn is_consistent(&self) -> bool {
        self.succeeded + self.failed + self.restored + self.pending == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureDetail {
    pub task_key: TaskKey,
    pub error_class: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationEvent {
    pub kind: EventKind,
    pub run_id: String,
    pub counts: EventCounts,
    pub timestamp_ms: u64,
    pub detail: Option<FailureDetail>,
}

/// Wire form shared by the webhook body and the file sink.
#[derive(Serialize)]
struct EventBody<'a> {
    run_id: &'a str,
    kind: &'static str,
    total: usize,
    succeeded: usize,
    failed: usize,
    restored: usize,
    pending: usize,
    timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    task_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_class: Option<&'a str>,
}

impl NotificationEvent {
    pub fn to_json(&self) -> String {
        let body = EventBody {
            run_id: &self.run_id,
            kind: self.kind.as_str(),
            total: self.counts.total,
            succeeded: self.counts.succeeded,
            failed: self.counts.failed,
            restored: self.counts.restored,
            pending: self.counts.pending,
            timestamp: self.timestamp_ms,
            task_key: self.detail.as_ref().map(|d| d.task_key.to_hex()),
            error_class: self.detail.as_ref().map(|d| d.error_class.as_str()),
        };
        serde_json::to_string(&body).expect("event serializes")
    }
}

/// The line printed by the console sink.
impl fmt::Display for NotificationEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.counts;
        match self.kind {
            EventKind::RunStarted => write!(f, "[mxrun] run {} started: {} tasks", self.run_id, c.total),
            EventKind::TaskFailed => {
                let (key, class) = self
                    .detail
                    .as_ref()
                    .map(|d| (d.task_key.to_hex(), d.error_class.as_str()))
                    .unwrap_or_default();
                write!(
                    f,
                    "[mxrun] run {} task {} failed ({}) [{}/{} done]",
                    self.run_id,
                    key.get(..12).unwrap_or(&key),
                    class,
                    c.total - c.pending,
                    c.total
                )
            }
            EventKind::RunCompleted => write!(
                f,
                "[mxrun] run {} completed: {} succeeded, {} failed, {} restored ({} total)",
                self.run_id, c.succeeded, c.failed, c.restored, c.total
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum DeliveryError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("webhook answered HTTP {0}")]
    Status(u16),
    #[error("webhook request failed: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryStatus {
    Delivered,
    FailedDelivery(String),
}

/// A destination for run events.
pub trait NotificationSink: Send {
    fn name(&self) -> String;
    fn deliver(&mut self, event: &NotificationEvent) -> Result<(), DeliveryError>;
}

/// One human-readable line per event.
pub struct ConsoleSink {
    out: Box<dyn Write + Send>,
}

impl ConsoleSink {
    pub fn stderr() -> Self {
        ConsoleSink {
            out: Box::new(io::stderr()),
        }
    }

    pub fn to_writer(out: impl Write + Send + 'static) -> Self {
        ConsoleSink { out: Box::new(out) }
    }
}

impl NotificationSink for ConsoleSink {
    fn name(&self) -> String {
        "console".into()
    }

    fn deliver(&mut self, event: &NotificationEvent) -> Result<(), DeliveryError> {
        writeln!(self.out, "{event}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Appends one JSON line per event.
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink { path: path.into() }
    }
}

impl NotificationSink for FileSink {
    fn name(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn deliver(&mut self, event: &NotificationEvent) -> Result<(), DeliveryError> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = event.to_json();
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// POSTs the JSON body; any 2xx counts as delivered. One retry after a
/// short backoff.
pub struct WebhookSink {
    url: String,
    agent: ureq::Agent,
    backoff: Duration,
}

impl WebhookSink {
    pub const TIMEOUT: Duration = Duration::from_secs(5);
    pub const BACKOFF: Duration = Duration::from_millis(250);

    pub fn new(url: &str) -> Result<Self, SinkSpecError> {
        let parsed = url::Url::parse(url).map_err(|e| SinkSpecError::BadUrl(url.to_owned(), e.to_string()))?;
        if !matches!(parsed.scheme(), "http" | "https") || parsed.host_str().is_none() {
            return Err(SinkSpecError::BadUrl(url.to_owned(), "expected an http(s) URL".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Self::TIMEOUT))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(WebhookSink {
            url: url.to_owned(),
            agent,
            backoff: Self::BACKOFF,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post(&self, body: &str) -> Result<(), DeliveryError> {
        let response = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| DeliveryError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(DeliveryError::Status(status))
        }
    }
}

impl NotificationSink for WebhookSink {
    fn name(&self) -> String {
        format!("webhook:{}", self.url)
    }

    fn deliver(&mut self, event: &NotificationEvent) -> Result<(), DeliveryError> {
        let body = event.to_json();
        match self.post(&body) {
            Ok(()) => Ok(()),
            Err(first) => {
                log::debug!("webhook {} failed ({first}); retrying once", self.url);
                std::thread::sleep(self.backoff);
                self.post(&body)
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SinkSpecError {
    #[error("unknown notification sink `{0}`; expected console, file:<path> or webhook:<url>")]
    Unknown(String),
    #[error("`file:` needs a path")]
    EmptyPath,
    #[error("invalid webhook URL `{0}`: {1}")]
    BadUrl(String, String),
}

/// Parsed `--notify` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkSpec {
    Console,
    File(PathBuf),
    Webhook(String),
}

impl FromStr for SinkSpec {
    type Err = SinkSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "console" {
            Ok(SinkSpec::Console)
        } else if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                Err(SinkSpecError::EmptyPath)
            } else {
                Ok(SinkSpec::File(path.into()))
            }
        } else if let Some(url) = s.strip_prefix("webhook:") {
            WebhookSink::new(url)?;
            Ok(SinkSpec::Webhook(url.to_owned()))
        } else {
            Err(SinkSpecError::Unknown(s.to_owned()))
        }
    }
}

impl SinkSpec {
    pub fn build(&self) -> Result<Box<dyn NotificationSink>, SinkSpecError> {
        Ok(match self {
            SinkSpec::Console => Box::new(ConsoleSink::stderr()),
            SinkSpec::File(path) => Box::new(FileSink::new(path.clone())),
            SinkSpec::Webhook(url) => Box::new(WebhookSink::new(url)?),
        })
    }
}

/// Fans events out to every configured sink.
#[derive(Default)]
pub struct Notifier {
    sinks: Mutex<Vec<Box<dyn NotificationSink>>>,
}

impl Notifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(self, sink: impl NotificationSink + 'static) -> Self {
        self.add(Box::new(sink));
        self
    }

    pub fn add(&self, sink: Box<dyn NotificationSink>) {
        self.sinks.lock().unwrap_or_else(|p| p.into_inner()).push(sink);
    }

    pub fn len(&self) -> usize {
        self.sinks.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Delivers to every sink, returning one status per sink.
    pub fn notify(&self, event: &NotificationEvent) -> Vec<DeliveryStatus> {
        let mut sinks = self.sinks.lock().unwrap_or_else(|p| p.into_inner());
        sinks
            .iter_mut()
            .map(|sink| match sink.deliver(event) {
                Ok(()) => DeliveryStatus::Delivered,
                Err(e) => {
                    log::warn!("notification to {} failed: {e}", sink.name());
                    DeliveryStatus::FailedDelivery(e.to_string())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    fn event(kind: EventKind, succeeded: usize, failed: usize, pending: usize) -> NotificationEvent {
        NotificationEvent {
            kind,
            run_id: "r1".into(),
            counts: EventCounts {
                total: succeeded + failed + pending,
                succeeded,
                failed,
                restored: 0,
                pending,
            },
            timestamp_ms: 1_700_000_000_000,
            detail: (kind == EventKind::TaskFailed).then(|| FailureDetail {
                task_key: TaskKey::digest(b"t"),
                error_class: "nonzero-exit".into(),
            }),
        }
    }

    #[test]
    fn console_line_for_completion() {
        let buf = SharedBuf::default();
        let mut sink = ConsoleSink::to_writer(buf.clone());
        sink.deliver(&event(EventKind::RunCompleted, 54, 0, 0)).unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("completed"));
        assert!(text.contains("54 succeeded, 0 failed"));
    }

    #[test]
    fn file_sink_appends_one_line_per_event() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("events.jsonl");
        let mut sink = FileSink::new(&path);
        sink.deliver(&event(EventKind::RunStarted, 0, 0, 3)).unwrap();
        let before = std::fs::read_to_string(&path).unwrap().lines().count();
        sink.deliver(&event(EventKind::TaskFailed, 0, 1, 2)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), before + 1);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["kind"], "task-failed");
        assert_eq!(last["error_class"], "nonzero-exit");
        assert_eq!(last["failed"], 1);
    }

    #[test]
    fn json_body_fields() {
        let v: serde_json::Value = serde_json::from_str(&event(EventKind::RunCompleted, 2, 1, 0).to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "failed",
                "kind",
                "pending",
                "restored",
                "run_id",
                "succeeded",
                "timestamp",
                "total"
            ]
        );
        assert_eq!(v["kind"], "run-completed");
    }

    #[test]
    fn sink_specs() {
        assert_eq!("console".parse(), Ok(SinkSpec::Console));
        assert_eq!("file:/tmp/x".parse(), Ok(SinkSpec::File("/tmp/x".into())));
        assert_eq!(
            "webhook:http://127.0.0.1:9/hook".parse(),
            Ok(SinkSpec::Webhook("http://127.0.0.1:9/hook".into()))
        );
        assert_eq!("file:".parse::<SinkSpec>(), Err(SinkSpecError::EmptyPath));
        assert!(matches!(
            "webhook:nope".parse::<SinkSpec>(),
            Err(SinkSpecError::BadUrl(..))
        ));
        assert!(matches!(
            "webhook:ftp://x/".parse::<SinkSpec>(),
            Err(SinkSpecError::BadUrl(..))
        ));
        assert!(matches!("email:me".parse::<SinkSpec>(), Err(SinkSpecError::Unknown(_))));
    }

    #[test]
    fn unreachable_webhook_fails_without_panicking() {
        // Bind then drop to get a port nobody listens on.
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let sink = WebhookSink::new(&format!("http://127.0.0.1:{port}/"))
            .unwrap()
            .with_backoff(Duration::from_millis(1));
        let notifier = Notifier::new().with_sink(sink);
        let status = notifier.notify(&event(EventKind::RunStarted, 0, 0, 1));
        assert!(matches!(status[..], [DeliveryStatus::FailedDelivery(_)]));
    }
}
