//! Append-only newline-delimited event log.
//!
//! Every append is flushed with `sync_data` before it returns. On open, a
//! torn final line (no trailing newline or unparseable) is discarded and the
//! file truncated to its last complete event.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::service::Escalation;
use crate::optimizer::{FeedbackRecord, OptimizerState, UpdateOutcome};
use crate::types::{Label, StageOutcome};

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    QueryCompleted {
        seq: u64,
        query_id: String,
        terminal_stage: usize,
        total_cost: f64,
        stage1_cost: f64,
    },
    EscalationCreated {
        escalation: Escalation,
        outcomes: Vec<StageOutcome>,
        total_cost: f64,
        stage1_cost: f64,
    },
    EscalationAnswered {
        escalation_id: String,
        answer: Label,
        answered_at: u64,
    },
    FeedbackAppended {
        escalation_id: String,
        record: FeedbackRecord,
    },
    /// Optimizer state after a step, or after a skipped step (`update` absent).
    ThresholdsUpdated {
        update: Option<UpdateOutcome>,
        state: OptimizerState,
    },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt event on line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    /// Byte offset of the end of every event, in order.
    ends: Vec<u64>,
}

impl EventLog {
    /// Opens (creating if needed) the log in `dir` and returns it with every
    /// complete event.
    pub fn open(dir: &Path) -> Result<(EventLog, Vec<Event>), LogError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| LogError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(EVENT_LOG);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io(&path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io(&path))?;

        let mut events = Vec::new();
        let mut ends = Vec::new();
        let mut offset = 0usize;
        let lines: Vec<&[u8]> = bytes.split_inclusive(|b| *b == b'\n').collect();
        for (i, line) in lines.iter().enumerate() {
            let last = i + 1 == lines.len();
            if !line.ends_with(b"\n") {
                tracing::warn!(path = %path.display(), "discarding torn trailing event");
                break;
            }
            match serde_json::from_slice::<Event>(line) {
                Ok(e) => events.push(e),
                Err(e) if last => {
                    tracing::warn!(path = %path.display(), error = %e, "discarding unreadable trailing event");
                    break;
                }
                Err(e) => {
                    return Err(LogError::Corrupt {
                        path,
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
            offset += line.len();
            ends.push(offset as u64);
        }
        let mut log = EventLog { path, file, ends };
        if offset != bytes.len() {
            log.truncate_to(events.len())?;
        }
        Ok((log, events))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Drops every event after the first `keep`.
    pub fn truncate_to(&mut self, keep: usize) -> Result<(), LogError> {
        let len = if keep == 0 { 0 } else { self.ends[keep - 1] };
        self.ends.truncate(keep);
        self.file
            .set_len(len)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| LogError::Io {
                path: self.path.clone(),
                source,
            })
    }

    /// Writes `events` with a single write and waits for them to reach disk.
    pub fn append(&mut self, events: &[Event]) -> Result<(), LogError> {
        let mut buf = Vec::new();
        let mut ends = Vec::with_capacity(events.len());
        let base = self.ends.last().copied().unwrap_or(0);
        for e in events {
            serde_json::to_writer(&mut buf, e).expect("events serialize");
            buf.push(b'\n');
            ends.push(base + buf.len() as u64);
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| LogError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.ends.extend(ends);
        Ok(())
    }
}
