//! Result export from a manifest and its checkpoint store.

use std::io::{self, Write};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::{Provenance, RunManifest, TaskRecord};
use crate::store::{CheckpointStore, Lookup};

/// Preview cell width limit, in bytes.
pub const PREVIEW_LIMIT: usize = 200;
pub const PAYLOAD_MISSING: &str = "payload-missing";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// Comma-separated values with a header row.
    Csv,
    /// One JSON object per task.
    JsonLines,
}

impl ExportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::JsonLines => "jsonl",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ExportFormat::JsonLines),
            other => Err(format!("unknown export format `{other}`; expected csv or json-lines")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExportSummary {
    pub rows: usize,
    /// Succeeded rows whose checkpoint could not be read.
    pub missing_payloads: usize,
}

impl ExportSummary {
    pub fn degraded(&self) -> bool {
        self.missing_payloads > 0
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("writing export: {0}")]
    Io(#[from] io::Error),
    #[error("writing export: {0}")]
    Csv(#[from] csv::Error),
}

/// First line of the payload, cut to at most [`PREVIEW_LIMIT`] bytes on a
/// character boundary.
pub fn payload_preview(payload: &[u8]) -> String {
    let first = payload.split(|&b| b == b'\n').next().unwrap_or_default();
    let text = String::from_utf8_lossy(first);
    let text = text.trim_end_matches('\r');
    if text.len() <= PREVIEW_LIMIT {
        return text.to_owned();
    }
    let mut end = PREVIEW_LIMIT;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_owned()
}

enum Payload {
    NotExpected,
    Present(Vec<u8>),
    Missing,
}

fn payload_for(record: &TaskRecord, store: Option<&CheckpointStore>) -> Payload {
    if !record.is_success() {
        return Payload::NotExpected;
    }
    match store.map(|s| s.lookup(&record.key)) {
        Some(Lookup::Hit(entry)) => Payload::Present(entry.result.unwrap_or_default()),
        _ => Payload::Missing,
    }
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    record: &'a TaskRecord,
    payload_missing: bool,
    payload_preview: Option<String>,
}

/// Writes one row per task in plan order, using the latest record per key.
pub fn export_results(
    manifest: &RunManifest,
    store: Option<&CheckpointStore>,
    format: ExportFormat,
    out: impl Write,
) -> Result<ExportSummary, ExportError> {
    let records = manifest.latest_in_plan_order();
    let mut summary = ExportSummary::default();
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header: Vec<&str> = manifest.header.dimensions.iter().map(|d| d.name.as_str()).collect();
            header.extend(["status", "duration_ms", "cached", "payload_preview"]);
            w.write_record(&header)?;
            for record in records {
                let assignment = record.assignment();
                let mut row: Vec<String> = manifest
                    .header
                    .dimensions
                    .iter()
                    .map(|d| assignment.get(&d.name).map(ToString::to_string).unwrap_or_default())
                    .collect();
                let preview = match payload_for(record, store) {
                    Payload::NotExpected => String::new(),
                    Payload::Present(p) => payload_preview(&p),
                    Payload::Missing => {
                        summary.missing_payloads += 1;
                        PAYLOAD_MISSING.to_owned()
                    }
                };
                row.push(record.status.as_str().to_owned());
                row.push(record.duration_ms.to_string());
                row.push((record.provenance == Provenance::Cache).to_string());
                row.push(preview);
                w.write_record(&row)?;
                summary.rows += 1;
            }
            w.flush()?;
        }
        ExportFormat::JsonLines => {
            let mut out = io::BufWriter::new(out);
            for record in records {
                let (payload_missing, payload_preview) = match payload_for(record, store) {
                    Payload::NotExpected => (false, None),
                    Payload::Present(p) => (false, Some(payload_preview(&p))),
                    Payload::Missing => {
                        summary.missing_payloads += 1;
                        (true, None)
                    }
                };
                let row = JsonRow {
                    record,
                    payload_missing,
                    payload_preview,
                };
                serde_json::to_writer(&mut out, &row).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
                summary.rows += 1;
            }
            out.flush()?;
        }
    }
    Ok(summary)
}
