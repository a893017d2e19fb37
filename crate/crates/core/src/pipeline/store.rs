//! Run-directory persistence: `config.snapshot.json`, append-only
//! `records.jsonl`, and `manifest.json`.
//!
//! Records are flushed one UTF-8 JSON line at a time, so a reader sees only
//! whole records and an interrupted run loses at most its final partial
//! line, which is dropped on resume.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig, RunRecord};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCounts {
    pub scheduled: usize,
    pub completed: usize,
    pub format_failures: usize,
    pub errors: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
    pub counts: RecordCounts,
}

fn io_error(context: &str, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = format!("{context} {}", path.display());
    move |source| PipelineError::Io { context, source }
}

pub fn snapshot_path(dir: &Path) -> PathBuf {
    dir.join(SNAPSHOT_FILE)
}

pub fn records_path(dir: &Path) -> PathBuf {
    dir.join(RECORDS_FILE)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn write_snapshot(dir: &Path, config: &RunConfig) -> Result<(), PipelineError> {
    let path = snapshot_path(dir);
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(&path, json.as_bytes()).map_err(io_error("write", &path))
}

pub fn read_snapshot(dir: &Path) -> Result<RunConfig, PipelineError> {
    let path = snapshot_path(dir);
    let text = fs::read_to_string(&path).map_err(io_error("read", &path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), PipelineError> {
    let path = manifest_path(dir);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json.as_bytes()).map_err(io_error("write", &path))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>, PipelineError> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_error("read", &path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))
}

/// Parsed records plus the byte length of the valid prefix. A malformed
/// final line (torn write) is dropped; a malformed line elsewhere is a
/// corruption error.
pub fn read_records_repair(dir: &Path) -> Result<(Vec<RunRecord>, u64), PipelineError> {
    let path = records_path(dir);
    if !path.exists() {
        return Ok((Vec::new(), 0));
    }
    let text = fs::read_to_string(&path).map_err(io_error("read", &path))?;
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut offset = 0usize;
    let mut pending_error: Option<String> = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches('\n');
        offset += line.len();
        if trimmed.trim().is_empty() {
            valid_len = offset as u64;
            continue;
        }
        if let Some(earlier) = pending_error.take() {
            // A malformed line followed by more data is real corruption.
            return Err(PipelineError::Store(earlier));
        }
        match serde_json::from_str::<RunRecord>(trimmed) {
            Ok(record) => {
                records.push(record);
                valid_len = offset as u64;
            }
            Err(e) => {
                pending_error = Some(format!("{}: bad record line: {e}", path.display()));
            }
        }
    }
    Ok((records, valid_len))
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, PipelineError> {
    read_records_repair(dir).map(|(records, _)| records)
}

/// Append-only record writer. One JSON object per line, flushed per record.
pub struct RecordWriter {
    file: File,
    path: PathBuf,
}

impl RecordWriter {
    /// Open for appending, truncating any torn final line first.
    pub fn open(dir: &Path, valid_len: u64) -> Result<Self, PipelineError> {
        let path = records_path(dir);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_error("open", &path))?;
        if file.metadata().map_err(io_error("stat", &path))?.len() > valid_len {
            file.set_len(valid_len).map_err(io_error("truncate", &path))?;
        }
        Ok(RecordWriter { file, path })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), PipelineError> {
        let line = serde_json::to_string(record).expect("records serialize");
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .and_then(|_| self.file.flush())
            .map_err(io_error("append", &self.path))
    }
}
