//! Append-only JSONL run store with a JSON manifest sidecar.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::aggregate::RunMean;
use crate::cascade::{CascadeResult, StageTranscript};
use crate::llm::RunConfig;
use crate::metrics::MetricScores;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Identity of a record: unique within a store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub model_name: String,
    pub strategy_name: String,
    pub run_index: u32,
    pub entry_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordOutcome {
    Completed {
        result: CascadeResult,
    },
    Failed {
        error: String,
        stage_index: Option<usize>,
        completed: Vec<StageTranscript>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entry_id: String,
    pub strategy_name: String,
    pub model_name: String,
    pub run_index: u32,
    pub outcome: RecordOutcome,
    /// `None` until scored.
    #[serde(default)]
    pub scores: Option<MetricScores>,
    pub config: RunConfig,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model_name: self.model_name.clone(),
            strategy_name: self.strategy_name.clone(),
            run_index: self.run_index,
            entry_id: self.entry_id.clone(),
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self.outcome, RecordOutcome::Completed { .. })
    }

    pub fn final_response(&self) -> Option<&str> {
        match &self.outcome {
            RecordOutcome::Completed { result } => Some(&result.final_response),
            RecordOutcome::Failed { .. } => None,
        }
    }

    /// Completed but not scored, or scored while a scorer was unreachable.
    pub fn needs_scoring(&self) -> bool {
        self.is_completed()
            && match &self.scores {
                None => true,
                Some(s) => !s.unavailable_reasons().is_empty(),
            }
    }

    /// Copy with wall-clock fields zeroed; identical runs compare equal.
    pub fn without_volatile(&self) -> Self {
        let mut r = self.clone();
        r.started_at = DateTime::<Utc>::UNIX_EPOCH;
        r.finished_at = DateTime::<Utc>::UNIX_EPOCH;
        let transcripts = match &mut r.outcome {
            RecordOutcome::Completed { result } => &mut result.transcripts,
            RecordOutcome::Failed { completed, .. } => completed,
        };
        for t in transcripts {
            t.latency_ms = 0.0;
        }
        r.scores = r.scores.as_ref().map(MetricScores::without_timings);
        r
    }
}

/// Order-independent hash of a store's content, ignoring wall-clock fields.
pub fn content_hash(records: &[RunRecord]) -> String {
    let mut stable: Vec<RunRecord> = records.iter().map(RunRecord::without_volatile).collect();
    stable.sort_by_key(RunRecord::key);
    let mut h = Sha256::new();
    for r in &stable {
        h.update(serde_json::to_vec(r).expect("record serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyManifest {
    pub name: String,
    pub hash: String,
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub created_at: DateTime<Utc>,
    pub dataset_path: Option<String>,
    pub dataset_hash: String,
    pub entries: usize,
    pub strategies: Vec<StrategyManifest>,
    pub models: Vec<String>,
    pub config: RunConfig,
    pub backend: String,
    /// `deterministic` for the mock backend, `nondeterministic` otherwise.
    pub sampling: String,
    pub seed: Option<u64>,
    pub scorer: Option<String>,
    /// Per-run dataset means, refreshed after every run or score pass.
    #[serde(default)]
    pub run_means: Vec<RunMean>,
}

#[derive(Debug)]
pub struct RunStore {
    path: PathBuf,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl RunStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            writer: Mutex::new(None),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest_path(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        self.path.with_file_name(name)
    }

    fn io_err(&self, source: io::Error) -> StoreError {
        StoreError::Io {
            path: self.path.clone(),
            source,
        }
    }

    /// Reads every record. A missing file is an empty store. An unparsable
    /// final line without a trailing newline (an interrupted append) is
    /// skipped with a warning.
    pub fn load(&self) -> Result<Vec<RunRecord>, StoreError> {
        self.flush()?;
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(self.io_err(e)),
        };
        let ends_with_newline = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut records = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) if i + 1 == lines.len() && !ends_with_newline => {
                    warn!("{}: ignoring truncated final line: {e}", self.path.display());
                }
                Err(e) => {
                    return Err(StoreError::Parse {
                        path: self.path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(records)
    }

    pub fn keys(&self) -> Result<HashSet<RecordKey>, StoreError> {
        Ok(self.load()?.iter().map(RunRecord::key).collect())
    }

    /// Appends one record as a single line. Safe to call from many threads.
    pub fn append(&self, record: &RunRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        let mut guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| self.io_err(e))?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| self.io_err(e))?;
            *guard = Some(BufWriter::new(file));
        }
        let w = guard.as_mut().expect("writer opened above");
        w.write_all(&line).map_err(|e| self.io_err(e))?;
        w.flush().map_err(|e| self.io_err(e))
    }

    /// Flushes and syncs pending appends to disk.
    pub fn flush(&self) -> Result<(), StoreError> {
        let mut guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(w) = guard.as_mut() {
            w.flush().map_err(|e| self.io_err(e))?;
            w.get_ref().sync_data().map_err(|e| self.io_err(e))?;
        }
        Ok(())
    }

    /// Atomically replaces the store's content (used when backfilling scores).
    pub fn rewrite(&self, records: &[RunRecord]) -> Result<(), StoreError> {
        let mut guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        *guard = None;
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let file = File::create(&tmp).map_err(|e| self.io_err(e))?;
            let mut w = BufWriter::new(file);
            for r in records {
                serde_json::to_writer(&mut w, r).expect("record serializes");
                w.write_all(b"\n").map_err(|e| self.io_err(e))?;
            }
            w.flush().map_err(|e| self.io_err(e))?;
            w.get_ref().sync_all().map_err(|e| self.io_err(e))?;
        }
        fs::rename(&tmp, &self.path).map_err(|e| self.io_err(e))
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>, StoreError> {
        let path = self.manifest_path();
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| StoreError::Parse {
                path,
                line: 0,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<(), StoreError> {
        let path = self.manifest_path();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| self.io_err(e))?;
        }
        let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|source| StoreError::Io { path, source })
    }
}
