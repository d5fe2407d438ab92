#![allow(dead_code)]

use cascadefer::solvers::{TraceRecord, TraceStore};
use cascadefer::types::Label;

fn record(query_id: &str, stage: usize, role: usize, answer: usize, conf: f64) -> TraceRecord {
    TraceRecord {
        query_id: query_id.into(),
        stage,
        role,
        answer: Label::from_index(answer).unwrap(),
        raw_confidence: conf,
        input_tokens: 120,
        output_tokens: 30,
        raw_uncertainty: 0.4,
    }
}

/// Traces for a four-stage cascade with four agents per multi stage.
/// `easy-*` queries are answered confidently at stage 1; `hard-*` queries get
/// low confidence and split votes everywhere.
pub fn traces(easy: usize, hard: usize) -> TraceStore {
    let mut out = Vec::new();
    for i in 0..easy {
        let id = format!("easy-{i}");
        for stage in 1..=4 {
            let roles = if stage % 2 == 0 { 4 } else { 1 };
            for role in 0..roles {
                out.push(record(&id, stage, role, 0, 0.99));
            }
        }
    }
    for i in 0..hard {
        let id = format!("hard-{i}");
        for stage in 1..=4 {
            if stage % 2 == 0 {
                for role in 0..4 {
                    out.push(record(&id, stage, role, (role + i) % 4, 0.3));
                }
            } else {
                out.push(record(
                    &id,
                    stage,
                    0,
                    (i + stage) % 4,
                    0.05 + 0.1 * (i % 5) as f64,
                ));
            }
        }
    }
    TraceStore::from_records(out).unwrap()
}
