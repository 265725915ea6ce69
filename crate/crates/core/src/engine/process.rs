//! Child-process execution with full output capture and an optional timeout.

use std::io::{self, Read};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

/// How long to keep draining pipes after a timed-out child was killed.
/// Grandchildren may still hold the pipe open.
const DRAIN_AFTER_KILL: Duration = Duration::from_secs(2);

pub(crate) const RESULT_FILE_ENV: &str = "MXRUN_RESULT_FILE";

#[derive(Debug)]
pub(crate) struct CommandOutcome {
    pub status: Option<ExitStatus>,
    pub timed_out: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    /// Contents of the result file, if the child wrote one.
    pub result_file: Option<Vec<u8>>,
}

impl CommandOutcome {
    pub fn exit_code(&self) -> Option<i32> {
        self.status.and_then(|s| s.code())
    }

    pub fn signal(&self) -> Option<i32> {
        #[cfg(unix)]
        {
            use std::os::unix::process::ExitStatusExt;
            self.status.and_then(|s| s.signal())
        }
        #[cfg(not(unix))]
        {
            None
        }
    }
}

/// Runs `command` through `sh -c`. Only spawn failures are errors; every
/// other outcome is described by the returned [`CommandOutcome`].
pub(crate) fn run_shell(
    command: &str,
    env: &[(String, String)],
    timeout: Option<Duration>,
) -> io::Result<CommandOutcome> {
    let scratch = tempfile::Builder::new().prefix("mxrun-task-").tempdir()?;
    let result_path = scratch.path().join("result");

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env(RESULT_FILE_ENV, &result_path);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn()?;
    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());

    let (status, timed_out) = wait(&mut child, timeout)?;
    let limit = timed_out.then_some(DRAIN_AFTER_KILL);
    let stdout = collect(stdout, limit);
    let stderr = collect(stderr, limit);

    let result_file = match std::fs::read(&result_path) {
        Ok(bytes) => Some(bytes),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    Ok(CommandOutcome {
        status,
        timed_out,
        stdout,
        stderr,
        result_file,
    })
}

fn wait(child: &mut Child, timeout: Option<Duration>) -> io::Result<(Option<ExitStatus>, bool)> {
    match timeout {
        None => Ok((Some(child.wait()?), false)),
        Some(limit) => match child.wait_timeout(limit)? {
            Some(status) => Ok((Some(status), false)),
            None => {
                // The child may exit between the timeout and the kill.
                kill_tree(child);
                let status = child.wait()?;
                Ok((Some(status), true))
            }
        },
    }
}

/// Kills the child and, where the platform exposes it, every descendant.
/// The root is stopped first so it cannot fork while its tree is walked.
fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        let root = child.id() as libc::pid_t;
        // SAFETY: plain signal delivery to pids we just observed.
        unsafe { libc::kill(root, libc::SIGSTOP) };
        for _ in 0..2 {
            for pid in descendants(root) {
                unsafe { libc::kill(pid, libc::SIGKILL) };
            }
        }
    }
    let _ = child.kill();
}

#[cfg(target_os = "linux")]
fn descendants(root: libc::pid_t) -> Vec<libc::pid_t> {
    use std::collections::HashMap;
    let mut children: HashMap<libc::pid_t, Vec<libc::pid_t>> = HashMap::new();
    let Ok(dir) = std::fs::read_dir("/proc") else {
        return Vec::new();
    };
    for entry in dir.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|n| n.parse::<libc::pid_t>().ok()) else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // `pid (comm) state ppid ...`; comm may contain spaces or parens.
        let ppid = stat
            .rfind(')')
            .and_then(|i| stat[i + 1..].split_whitespace().nth(1))
            .and_then(|p| p.parse().ok());
        if let Some(ppid) = ppid {
            children.entry(ppid).or_default().push(pid);
        }
    }
    let mut out = Vec::new();
    let mut frontier = vec![root];
    while let Some(pid) = frontier.pop() {
        for &c in children.get(&pid).map(Vec::as_slice).unwrap_or_default() {
            out.push(c);
            frontier.push(c);
        }
    }
    out
}

#[cfg(all(unix, not(target_os = "linux")))]
fn descendants(_root: libc::pid_t) -> Vec<libc::pid_t> {
    Vec::new()
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> mpsc::Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    match pipe {
        Some(mut pipe) => {
            thread::spawn(move || {
                let mut buf = Vec::new();
                let _ = pipe.read_to_end(&mut buf);
                let _ = tx.send(buf);
            });
        }
        None => {
            let _ = tx.send(Vec::new());
        }
    }
    rx
}

fn collect(rx: mpsc::Receiver<Vec<u8>>, limit: Option<Duration>) -> Vec<u8> {
    match limit {
        None => rx.recv().unwrap_or_default(),
        Some(limit) => rx.recv_timeout(limit).unwrap_or_default(),
    }
}
