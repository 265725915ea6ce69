//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_mxrun");

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// `mxrun` with `dir` as working directory and a clean environment.
pub fn mxrun(dir: &Path) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(dir)
        .env_remove("MXRUN_CACHE_DIR")
        .env_remove("MXRUN_LOG")
        .env("NO_COLOR", "1")
        .stdin(Stdio::null());
    cmd
}

#[derive(Debug)]
pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning mxrun");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs `mxrun <args>` in `dir`.
pub fn mx(dir: &Path, args: &[&str]) -> Output {
    run(mxrun(dir).args(args))
}

/// The number before `label` in a run summary line, e.g. `3 executed`.
pub fn summary_count(stdout: &str, label: &str) -> usize {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("run "))
        .unwrap_or_else(|| panic!("no summary line in {stdout:?}"));
    let words: Vec<&str> = line.split([' ', ',', ':']).filter(|w| !w.is_empty()).collect();
    words
        .windows(2)
        .find(|w| w[1] == label)
        .and_then(|w| w[0].parse().ok())
        .unwrap_or_else(|| panic!("no `{label}` count in {line:?}"))
}

/// Total marker lines written by stub commands under `dir`.
pub fn marker_lines(dir: &Path) -> usize {
    match fs::read_dir(dir) {
        Ok(entries) => entries
            .map(|e| fs::read_to_string(e.unwrap().path()).unwrap().lines().count())
            .sum(),
        Err(_) => 0,
    }
}

/// Lines per marker file, keyed by file name.
pub fn marker_counts(dir: &Path) -> std::collections::BTreeMap<String, usize> {
    fs::read_dir(dir)
        .map(|entries| {
            entries
                .map(|e| {
                    let e = e.unwrap();
                    let n = fs::read_to_string(e.path()).unwrap().lines().count();
                    (e.file_name().to_string_lossy().into_owned(), n)
                })
                .collect()
        })
        .unwrap_or_default()
}

/// A config with one integer dimension `i = 0..n`, extra settings, and a
/// runner command.
pub fn stub_config(n: usize, settings: &[(&str, &Path)], command: &str) -> String {
    let values: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let mut text = format!("[parameters]\ni = [{}]\n\n[settings]\n", values.join(", "));
    for (name, path) in settings {
        text.push_str(&format!("{name} = '{}'\n", path.display()));
    }
    text.push_str(&format!(
        "\n[runner]\ncommand = \"{}\"\n",
        command.replace('\\', "\\\\").replace('"', "\\\"")
    ));
    text
}

pub fn write(path: &Path, text: &str) -> PathBuf {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).unwrap();
    }
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// Golden listing lines as `(key, "dim=value ...")`.
pub fn read_golden(name: &str) -> Vec<(String, String)> {
    fs::read_to_string(golden(name))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (k, rest) = l.split_once("  ").expect("golden line has two-space separator");
            (k.to_owned(), rest.to_owned())
        })
        .collect()
}
