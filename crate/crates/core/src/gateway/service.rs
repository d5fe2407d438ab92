//! Gateway state: escalation queue, feedback ingestion and snapshots.
//!
//! All mutations go through [`Gateway`] and are written to the event log
//! before they become visible. Reopening a data directory replays the log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::log::{Event, EventLog, LogError};
use crate::engine::{Cascade, Decision, EngineError, Thresholds};
use crate::error::ValidationError;
use crate::harness::feedback_record;
use crate::optimizer::{OnlineOptimizer, UpdateOutcome};
use crate::types::{Label, Query, StageOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EscalationStatus {
    Pending,
    Answered,
}

/// What the expert sees about one visited stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub label: String,
    pub phi: f64,
    pub xi: f64,
    pub answer: Option<Label>,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<Label>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub escalation_id: String,
    pub seq: u64,
    /// Never carries a gold label.
    pub query: Query,
    pub decision_path: Vec<StageSummary>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub status: EscalationStatus,
    #[serde(default)]
    pub expert_answer: Option<Label>,
    #[serde(default)]
    pub answered_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub prompt: String,
    pub choices: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub query_id: String,
    pub answer: Option<Label>,
    pub terminal_stage: usize,
    pub escalation_id: Option<String>,
    pub status: Option<EscalationStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSnapshot {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub accepted: bool,
    /// Whether this feedback triggered an optimizer step.
    pub updated: bool,
    pub new_thresholds: ThresholdSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationPage {
    pub items: Vec<Escalation>,
    /// Opaque; pass back to continue after the last returned item.
    pub next_cursor: String,
    pub has_more: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: usize,
    pub label: String,
    pub count: usize,
}

/// Live counterpart of the stream report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub queries: usize,
    pub histogram: Vec<StageCount>,
    pub mean_cost: f64,
    pub cost_multiple: f64,
    pub expert_load: f64,
    pub pending_escalations: usize,
    pub answered_escalations: usize,
    pub feedback_records: u64,
    pub buffer_len: usize,
    pub optimizer_steps: u64,
    pub skipped_updates: u64,
    pub taus: Vec<f64>,
    pub trajectory: Vec<UpdateOutcome>,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request")]
    Validation(Vec<ValidationError>),
    #[error("escalation {0} not found")]
    NotFound(String),
    #[error("escalation {0} is already answered")]
    Conflict(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Storage(#[from] LogError),
    #[error("event log does not match the configured cascade: {0}")]
    Incompatible(String),
}

impl GatewayError {
    fn field(path: &str, message: impl Into<String>) -> Self {
        GatewayError::Validation(vec![ValidationError::new(path, message)])
    }
}

struct Entry {
    escalation: Escalation,
    outcomes: Vec<StageOutcome>,
}

#[derive(Default)]
struct Tally {
    queries: usize,
    per_stage: HashMap<usize, usize>,
    total_cost: f64,
    stage1_cost: f64,
    human: usize,
}

impl Tally {
    fn add(&mut self, terminal_stage: usize, total_cost: f64, stage1_cost: f64, human: bool) {
        self.queries += 1;
        *self.per_stage.entry(terminal_stage).or_default() += 1;
        self.total_cost += total_cost;
        self.stage1_cost += stage1_cost;
        self.human += usize::from(human);
    }
}

struct Inner {
    log: EventLog,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    optimizer: OnlineOptimizer,
    trajectory: Vec<UpdateOutcome>,
    tally: Tally,
    next_seq: u64,
    human_stage: usize,
}

impl Inner {
    fn apply(&mut self, event: Event) -> Result<(), GatewayError> {
        match event {
            Event::QueryCompleted {
                seq,
                terminal_stage,
                total_cost,
                stage1_cost,
                ..
            } => {
                self.next_seq = self.next_seq.max(seq + 1);
                self.tally
                    .add(terminal_stage, total_cost, stage1_cost, false);
            }
            Event::EscalationCreated {
                escalation,
                outcomes,
                total_cost,
                stage1_cost,
            } => {
                self.next_seq = self.next_seq.max(escalation.seq + 1);
                self.tally
                    .add(self.human_stage, total_cost, stage1_cost, true);
                self.index
                    .insert(escalation.escalation_id.clone(), self.entries.len());
                self.entries.push(Entry {
                    escalation,
                    outcomes,
                });
            }
            Event::EscalationAnswered {
                escalation_id,
                answer,
                answered_at,
            } => {
                let i = *self.index.get(&escalation_id).ok_or_else(|| {
                    GatewayError::Incompatible(format!(
                        "answer for unknown escalation {escalation_id}"
                    ))
                })?;
                let e = &mut self.entries[i].escalation;
                e.status = EscalationStatus::Answered;
                e.expert_answer = Some(answer);
                e.answered_at = Some(answered_at);
            }
            Event::FeedbackAppended { record, .. } => self.optimizer.push(record),
            Event::ThresholdsUpdated { update, state } => {
                if state.thresholds.len() != self.optimizer.thresholds().len() {
                    return Err(GatewayError::Incompatible(format!(
                        "logged thresholds cover {} stages, cascade has {}",
                        state.thresholds.len(),
                        self.optimizer.thresholds().len()
                    )));
                }
                self.optimizer.restore(state);
                self.trajectory.extend(update);
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> ThresholdSnapshot {
        ThresholdSnapshot {
            step: self.optimizer.steps(),
            thresholds: self.optimizer.thresholds().clone(),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Thread-safe gateway service. Cascade runs happen outside the state lock.
pub struct Gateway {
    cascade: Cascade,
    inner: Mutex<Inner>,
}

impl Gateway {
    /// Opens the data directory, replaying any existing event log.
    pub fn open(data_dir: &Path, cascade: Cascade) -> Result<Gateway, GatewayError> {
        let (mut log, mut events) = EventLog::open(data_dir)?;
        // An answer is written together with its feedback record and, when the
        // buffer was full enough, the resulting optimizer state. A crash can
        // leave only a prefix of that group at the tail; drop it.
        let feedbacks = events
            .iter()
            .filter(|e| matches!(e, Event::FeedbackAppended { .. }))
            .count();
        let expects_step =
            feedbacks.min(cascade.config.buffer_capacity) >= cascade.config.batch_size;
        let keep = match events.as_slice() {
            [.., Event::EscalationAnswered { .. }, Event::FeedbackAppended { .. }]
                if expects_step =>
            {
                events.len() - 2
            }
            [.., Event::EscalationAnswered { .. }] => events.len() - 1,
            _ => events.len(),
        };
        if keep < events.len() {
            tracing::warn!(
                dropped = events.len() - keep,
                "discarding incomplete feedback group"
            );
            events.truncate(keep);
            log.truncate_to(keep)?;
        }
        let mut inner = Inner {
            log,
            entries: Vec::new(),
            index: HashMap::new(),
            optimizer: OnlineOptimizer::new(&cascade.config),
            trajectory: Vec::new(),
            tally: Tally::default(),
            next_seq: 0,
            human_stage: cascade.config.stages.last().map_or(0, |s| s.index),
        };
        let replayed = events.len();
        for e in events {
            inner.apply(e)?;
        }
        tracing::info!(
            events = replayed,
            escalations = inner.entries.len(),
            "gateway state restored"
        );
        Ok(Gateway {
            cascade,
            inner: Mutex::new(inner),
        })
    }

    pub fn cascade(&self) -> &Cascade {
        &self.cascade
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Routes one live query. Blocks on solver calls.
    pub fn submit_query(&self, request: SubmitRequest) -> Result<SubmitResponse, GatewayError> {
        let (thresholds, seq) = {
            let mut inner = self.lock();
            inner.next_seq += 1;
            (inner.optimizer.thresholds().clone(), inner.next_seq - 1)
        };
        let id = request.id.clone().unwrap_or_else(|| format!("g{seq:06}"));
        let query = Query::new(id, request.prompt, request.choices, None, None)
            .map_err(GatewayError::Validation)?;
        let result = self.cascade.run_cascade(&query, &thresholds)?;
        let path = &result.decision_path;
        if !path.is_empty() && path.iter().all(|s| s.outcome.is_failure()) {
            let reason = path[0].outcome.failure.clone().unwrap_or_default();
            return Err(GatewayError::Unavailable(reason));
        }
        let stage1_cost = path.first().map_or(0.0, |s| s.outcome.cost);

        let mut inner = self.lock();
        if !result.human_terminal {
            let event = Event::QueryCompleted {
                seq,
                query_id: query.id.clone(),
                terminal_stage: result.terminal_stage,
                total_cost: result.total_cost,
                stage1_cost,
            };
            inner.log.append(std::slice::from_ref(&event))?;
            inner.apply(event)?;
            return Ok(SubmitResponse {
                query_id: query.id,
                answer: result.final_answer,
                terminal_stage: result.terminal_stage,
                escalation_id: None,
                status: None,
            });
        }

        let model_stages = self.cascade.config.model_stages();
        let escalation = Escalation {
            escalation_id: format!("esc-{seq:06}"),
            seq,
            query: query.without_gold(),
            decision_path: path
                .iter()
                .zip(model_stages)
                .map(|(s, spec)| StageSummary {
                    stage: s.outcome.stage,
                    label: spec.label(),
                    phi: s.outcome.phi,
                    xi: s.outcome.xi,
                    answer: s.outcome.answer,
                    decision: s.decision,
                    votes: s.outcome.votes.clone(),
                    failure: s.outcome.failure.clone(),
                })
                .collect(),
            created_at: now_ms(),
            status: EscalationStatus::Pending,
            expert_answer: None,
            answered_at: None,
        };
        let event = Event::EscalationCreated {
            escalation: escalation.clone(),
            outcomes: path.iter().map(|s| s.outcome.clone()).collect(),
            total_cost: result.total_cost,
            stage1_cost,
        };
        inner.log.append(std::slice::from_ref(&event))?;
        inner.apply(event)?;
        Ok(SubmitResponse {
            query_id: query.id,
            answer: None,
            terminal_stage: result.terminal_stage,
            escalation_id: Some(escalation.escalation_id),
            status: Some(EscalationStatus::Pending),
        })
    }

    /// Records the expert's answer, appends its feedback record and runs one
    /// optimizer step when the buffer is large enough. Blocks on solver calls
    /// for stages the query never visited.
    pub fn post_feedback(
        &self,
        escalation_id: &str,
        answer: Label,
    ) -> Result<FeedbackResponse, GatewayError> {
        let (query, mut outcomes) = {
            let inner = self.lock();
            let entry = self.entry(&inner, escalation_id)?;
            if !entry.escalation.query.has_choice(answer) {
                return Err(GatewayError::field(
                    "expert_answer",
                    format!("{answer} is not one of the query's choices"),
                ));
            }
            (entry.escalation.query.clone(), entry.outcomes.clone())
        };
        let labeled = Query {
            gold: Some(answer),
            ..query
        };
        let stages = self.cascade.config.model_stages();
        for stage in &stages[outcomes.len().min(stages.len())..] {
            let o = self
                .cascade
                .evaluate_stage(&labeled, stage)
                .map_err(|source| EngineError::Aborted {
                    query_id: labeled.id.clone(),
                    source,
                })?;
            outcomes.push(o);
        }
        let record = feedback_record(&labeled, &outcomes).expect("labeled query");

        let mut inner = self.lock();
        // compare-and-set: another expert may have answered meanwhile
        self.entry(&inner, escalation_id)?;
        let mut optimizer = inner.optimizer.clone();
        optimizer.push(record.clone());
        let update = optimizer.online_update();
        let mut events = vec![
            Event::EscalationAnswered {
                escalation_id: escalation_id.to_string(),
                answer,
                answered_at: now_ms(),
            },
            Event::FeedbackAppended {
                escalation_id: escalation_id.to_string(),
                record,
            },
        ];
        let updated = update.is_some();
        if updated || optimizer.skipped() != inner.optimizer.skipped() {
            events.push(Event::ThresholdsUpdated {
                update,
                state: optimizer.state().clone(),
            });
        }
        inner.log.append(&events)?;
        for e in events {
            inner.apply(e)?;
        }
        Ok(FeedbackResponse {
            accepted: true,
            updated,
            new_thresholds: inner.snapshot(),
        })
    }

    fn entry<'a>(&self, inner: &'a Inner, escalation_id: &str) -> Result<&'a Entry, GatewayError> {
        let i = *inner
            .index
            .get(escalation_id)
            .ok_or_else(|| GatewayError::NotFound(escalation_id.to_string()))?;
        let entry = &inner.entries[i];
        if entry.escalation.status == EscalationStatus::Answered {
            return Err(GatewayError::Conflict(escalation_id.to_string()));
        }
        Ok(entry)
    }

    pub fn get_escalation(&self, escalation_id: &str) -> Option<Escalation> {
        let inner = self.lock();
        inner
            .index
            .get(escalation_id)
            .map(|&i| inner.entries[i].escalation.clone())
    }

    /// Escalations in creation order after `cursor`, optionally filtered by status.
    pub fn list_escalations(
        &self,
        status: Option<EscalationStatus>,
        cursor: Option<&str>,
        limit: usize,
    ) -> Result<EscalationPage, GatewayError> {
        let after = match cursor {
            None | Some("") => None,
            Some(c) => Some(
                decode_cursor(c)
                    .ok_or_else(|| GatewayError::field("cursor", "malformed cursor"))?,
            ),
        };
        let limit = limit.max(1);
        let inner = self.lock();
        let mut matching = inner
            .entries
            .iter()
            .map(|e| &e.escalation)
            .filter(|e| after.is_none_or(|a| e.seq > a))
            .filter(|e| status.is_none_or(|s| e.status == s));
        let items: Vec<Escalation> = matching.by_ref().take(limit).cloned().collect();
        let has_more = matching.next().is_some();
        let next_cursor = match (items.last(), after) {
            (Some(e), _) => encode_cursor(e.seq),
            (None, Some(a)) => encode_cursor(a),
            (None, None) => String::new(),
        };
        Ok(EscalationPage {
            items,
            next_cursor,
            has_more,
        })
    }

    pub fn thresholds(&self) -> ThresholdSnapshot {
        self.lock().snapshot()
    }

    pub fn metrics(&self) -> ServiceMetrics {
        let inner = self.lock();
        let t = &inner.tally;
        let n = t.queries.max(1) as f64;
        let histogram = self
            .cascade
            .config
            .stages
            .iter()
            .map(|s| StageCount {
                stage: s.index,
                label: s.label(),
                count: t.per_stage.get(&s.index).copied().unwrap_or(0),
            })
            .collect();
        let answered = inner
            .entries
            .iter()
            .filter(|e| e.escalation.status == EscalationStatus::Answered)
            .count();
        ServiceMetrics {
            queries: t.queries,
            histogram,
            mean_cost: t.total_cost / n,
            cost_multiple: if t.stage1_cost > 0.0 {
                t.total_cost / t.stage1_cost
            } else {
                0.0
            },
            expert_load: t.human as f64 / n,
            pending_escalations: inner.entries.len() - answered,
            answered_escalations: answered,
            feedback_records: inner.optimizer.buffer.total_appended(),
            buffer_len: inner.optimizer.buffer.len(),
            optimizer_steps: inner.optimizer.steps(),
            skipped_updates: inner.optimizer.skipped(),
            taus: inner.optimizer.thresholds().taus(),
            trajectory: inner.trajectory.clone(),
        }
    }

    /// Query ids of every feedback record in the buffer, oldest first.
    pub fn buffer_query_ids(&self) -> Vec<String> {
        self.lock()
            .optimizer
            .buffer
            .records()
            .map(|r| r.query_id.clone())
            .collect()
    }
}

fn encode_cursor(seq: u64) -> String {
    hex::encode(seq.to_be_bytes())
}

fn decode_cursor(cursor: &str) -> Option<u64> {
    let bytes: [u8; 8] = hex::decode(cursor).ok()?.try_into().ok()?;
    Some(u64::from_be_bytes(bytes))
}
