//! Frozen solver outputs replayed from newline-delimited JSON traces.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Solver, SolverError, SolverResponse};
use crate::config::StageSpec;
use crate::types::{Label, Query};

/// One recorded agent call. Role is 0 for single-model stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub stage: usize,
    pub role: usize,
    pub answer: Label,
    pub raw_confidence: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub raw_uncertainty: f64,
}

impl TraceRecord {
    pub fn response(&self) -> SolverResponse {
        SolverResponse {
            answer: self.answer,
            raw_confidence: self.raw_confidence,
            input_tokens: self.input_tokens,
            output_tokens: self.output_tokens,
            raw_uncertainty: self.raw_uncertainty,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(
        "trace line {line}: duplicate record for (query {query_id}, stage {stage}, role {role})"
    )]
    Duplicate {
        line: usize,
        query_id: String,
        stage: usize,
        role: usize,
    },
}

type Key = (String, usize, usize);

#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    records: HashMap<Key, TraceRecord>,
}

impl TraceStore {
    pub fn from_records(
        records: impl IntoIterator<Item = TraceRecord>,
    ) -> Result<Self, TraceError> {
        let mut store = TraceStore::default();
        for (i, r) in records.into_iter().enumerate() {
            store.insert(r, i + 1)?;
        }
        Ok(store)
    }

    fn insert(&mut self, record: TraceRecord, line: usize) -> Result<(), TraceError> {
        let key = (record.query_id.clone(), record.stage, record.role);
        if self.records.contains_key(&key) {
            return Err(TraceError::Duplicate {
                line,
                query_id: key.0,
                stage: key.1,
                role: key.2,
            });
        }
        if !(0.0..=1.0).contains(&record.raw_confidence)
            || record.raw_uncertainty.is_nan()
            || record.raw_uncertainty < 0.0
        {
            return Err(TraceError::Parse {
                line,
                message:
                    "raw_confidence must lie in [0, 1] and raw_uncertainty must be nonnegative"
                        .into(),
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, TraceError> {
        let mut store = TraceStore::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord =
                serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            store.insert(record, i + 1)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(
        &self,
        query_id: &str,
        stage: usize,
        role: usize,
    ) -> Result<&TraceRecord, SolverError> {
        self.records
            .get(&(query_id.to_string(), stage, role))
            .ok_or_else(|| SolverError::TraceIncomplete {
                query_id: query_id.to_string(),
                stage,
                role,
            })
    }

    /// Writes records sorted by `(query_id, stage, role)`.
    pub fn write(&self, mut out: impl Write) -> io::Result<()> {
        let mut keys: Vec<_> = self.records.keys().collect();
        keys.sort();
        for k in keys {
            serde_json::to_writer(&mut out, &self.records[k])?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Returns the recorded response verbatim.
pub fn replay_lookup(
    store: &TraceStore,
    query_id: &str,
    stage: usize,
    role: usize,
) -> Result<SolverResponse, SolverError> {
    store
        .lookup(query_id, stage, role)
        .map(TraceRecord::response)
}

#[derive(Debug, Clone)]
pub struct ReplayBackend {
    pub store: TraceStore,
}

impl ReplayBackend {
    pub fn new(store: TraceStore) -> Self {
        ReplayBackend { store }
    }
}

impl Solver for ReplayBackend {
    fn solve(
        &self,
        query: &Query,
        stage: &StageSpec,
        role_index: usize,
    ) -> Result<SolverResponse, SolverError> {
        replay_lookup(&self.store, &query.id, stage.index, role_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRACE: &str = r#"{"query_id":"q1","stage":1,"role":0,"answer":"A","raw_confidence":0.92,"input_tokens":50,"output_tokens":10,"raw_uncertainty":0.3}
{"query_id":"q1","stage":2,"role":1,"answer":"B","raw_confidence":0.5,"input_tokens":60,"output_tokens":12,"raw_uncertainty":0.0,"extra":"ignored"}
"#;

    #[test]
    fn lookup_returns_record_verbatim() {
        let store = TraceStore::from_reader(TRACE.as_bytes()).unwrap();
        let r = replay_lookup(&store, "q1", 1, 0).unwrap();
        assert_eq!(r.answer, Label::from_char('A').unwrap());
        assert_eq!(r.raw_confidence, 0.92);
        assert_eq!((r.input_tokens, r.output_tokens), (50, 10));
    }

    #[test]
    fn absent_key_is_trace_incomplete() {
        let store = TraceStore::from_reader(TRACE.as_bytes()).unwrap();
        let err = replay_lookup(&store, "q1", 3, 2).unwrap_err();
        assert_eq!(
            err,
            SolverError::TraceIncomplete {
                query_id: "q1".into(),
                stage: 3,
                role: 2
            }
        );
        assert!(err.is_fatal());
        assert!(err.to_string().contains("q1"));
    }

    #[test]
    fn duplicate_key_rejected_on_load() {
        let first = TRACE.lines().next().unwrap();
        let text = format!("{first}\n{first}\n");
        assert!(matches!(
            TraceStore::from_reader(text.as_bytes()),
            Err(TraceError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn written_traces_drop_unknown_fields() {
        let store = TraceStore::from_reader(TRACE.as_bytes()).unwrap();
        let mut out = Vec::new();
        store.write(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(!text.contains("extra"));
        let back = TraceStore::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn out_of_range_confidence_rejected() {
        let text = TRACE.lines().next().unwrap().replace("0.92", "1.5");
        assert!(matches!(
            TraceStore::from_reader(text.as_bytes()),
            Err(TraceError::Parse { .. })
        ));
    }
}
