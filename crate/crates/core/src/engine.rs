//! Per-query cascade execution: stage loop, accept/abstain/defer decisions
//! and cost accounting.
//!
//! Stage `k` accepts when its calibrated confidence strictly exceeds the
//! deferral threshold, abstains straight to the human stage when its
//! uncertainty strictly exceeds the abstention threshold, and otherwise defers
//! to stage `k + 1`. Accept is checked first.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibratorSet;
use crate::config::{CascadeConfig, StageKind, StageSpec};
use crate::consensus::run_multi_stage;
use crate::math::{logit, sigmoid};
use crate::solvers::{Solver, SolverError};
use crate::types::{Label, Query, StageOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Abstain,
    Defer,
}

pub fn stage_decision(phi: f64, xi: f64, tau_d: f64, tau_a: f64) -> Decision {
    if phi > tau_d {
        Decision::Accept
    } else if xi > tau_a {
        Decision::Abstain
    } else {
        Decision::Defer
    }
}

/// Cost units of one solver call: `input + rho * output`.
pub fn stage_cost(input_tokens: u64, output_tokens: u64, rho: f64) -> f64 {
    input_tokens as f64 + rho * output_tokens as f64
}

/// Deferral and abstention thresholds for one model stage. The deferral
/// threshold is stored through its logit; `tau_d = sigmoid(theta_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageThreshold {
    pub theta_d: f64,
    pub tau_a: f64,
}

impl StageThreshold {
    pub fn tau_d(&self) -> f64 {
        sigmoid(self.theta_d)
    }
}

#[derive(Serialize, Deserialize)]
struct StageThresholdRepr {
    theta_d: f64,
    #[serde(default)]
    tau_d: f64,
    tau_a: f64,
}

impl Serialize for StageThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        StageThresholdRepr {
            theta_d: self.theta_d,
            tau_d: self.tau_d(),
            tau_a: self.tau_a,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for StageThreshold {
    // tau_d is derived; any stored value is ignored
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = StageThresholdRepr::deserialize(d)?;
        Ok(StageThreshold {
            theta_d: r.theta_d,
            tau_a: r.tau_a,
        })
    }
}

/// Threshold snapshot for every model stage, in stage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub stages: Vec<StageThreshold>,
}

impl Thresholds {
    pub fn uniform(model_stages: usize, tau_d: f64, tau_a: f64) -> Self {
        Thresholds {
            stages: vec![
                StageThreshold {
                    theta_d: logit(tau_d),
                    tau_a
                };
                model_stages
            ],
        }
    }

    /// Initial thresholds: `init_tau` everywhere, `tau_a` from the config.
    pub fn from_config(config: &CascadeConfig) -> Self {
        Self::uniform(config.num_model_stages(), config.init_tau, config.tau_a)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.stages.iter().map(StageThreshold::tau_d).collect()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.theta_d).collect()
    }

    pub fn with_thetas(&self, thetas: &[f64]) -> Self {
        Thresholds {
            stages: self
                .stages
                .iter()
                .zip(thetas)
                .map(|(s, &theta_d)| StageThreshold { theta_d, ..*s })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub outcome: StageOutcome,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub query_id: String,
    /// `None` while a human-terminal query awaits its expert answer.
    pub final_answer: Option<Label>,
    /// Index of the accepting stage, or of the Human stage.
    pub terminal_stage: usize,
    pub human_terminal: bool,
    pub decision_path: Vec<PathStep>,
    pub total_cost: f64,
    pub correct: Option<bool>,
}

impl CascadeResult {
    /// Compact per-query line for the results file.
    pub fn record(&self) -> ResultRecord {
        ResultRecord {
            query_id: self.query_id.clone(),
            stages: self
                .decision_path
                .iter()
                .map(|s| StageRecord {
                    stage: s.outcome.stage,
                    phi: s.outcome.phi,
                    xi: s.outcome.xi,
                    decision: s.decision,
                    cost: s.outcome.cost,
                })
                .collect(),
            terminal_stage: self.terminal_stage,
            human_terminal: self.human_terminal,
            total_cost: self.total_cost,
            correct: self.correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub phi: f64,
    pub xi: f64,
    pub decision: Decision,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    pub stages: Vec<StageRecord>,
    pub terminal_stage: usize,
    pub human_terminal: bool,
    pub total_cost: f64,
    pub correct: Option<bool>,
}

/// Appends one JSON line per result.
pub fn write_results<'a>(
    mut out: impl Write,
    results: impl IntoIterator<Item = &'a CascadeResult>,
) -> io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, &r.record())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// How a stage failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageError {
    /// Aborts the query (missing trace data).
    #[error(transparent)]
    Fatal(SolverError),
    /// Recorded as a deferral with zero confidence.
    #[error("stage failed: {reason}")]
    Failed { reason: String, cost: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("query {query_id} aborted")]
    Aborted {
        query_id: String,
        #[source]
        source: SolverError,
    },
    #[error("thresholds cover {got} stages but the cascade has {expected} model stages")]
    ThresholdMismatch { expected: usize, got: usize },
    #[error("{0} model stages evaluated, expected {1}")]
    OutcomeMismatch(usize, usize),
}

/// A configured cascade: stages, solver backend and calibrators.
#[derive(Clone)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub backend: Arc<dyn Solver>,
    pub calibrators: CalibratorSet,
}

impl Cascade {
    pub fn new(
        config: CascadeConfig,
        backend: Arc<dyn Solver>,
        calibrators: CalibratorSet,
    ) -> Self {
        Cascade {
            config,
            backend,
            calibrators,
        }
    }

    /// Runs one model stage; solver failures become failed outcomes.
    pub fn evaluate_stage(
        &self,
        query: &Query,
        stage: &StageSpec,
    ) -> Result<StageOutcome, SolverError> {
        let rho = self.config.rho;
        match stage.kind {
            StageKind::Multi => {
                match run_multi_stage(query, stage, self.backend.as_ref(), &self.calibrators, rho) {
                    Ok(o) => Ok(o),
                    Err(StageError::Fatal(e)) => Err(e),
                    Err(StageError::Failed { reason, cost }) => {
                        Ok(StageOutcome::failed(stage.index, cost, reason))
                    }
                }
            }
            StageKind::Single => match self.backend.solve(query, stage, 0) {
                Ok(r) => {
                    let cost = stage_cost(r.input_tokens, r.output_tokens, rho);
                    if !query.has_choice(r.answer) {
                        return Ok(StageOutcome::failed(
                            stage.index,
                            cost,
                            format!("answer {} is not a valid choice", r.answer),
                        ));
                    }
                    let raw = r.raw_confidence.clamp(0.0, 1.0);
                    Ok(StageOutcome {
                        stage: stage.index,
                        answer: Some(r.answer),
                        phi: self.calibrators.calibrate(&stage.label(), raw),
                        xi: r.raw_uncertainty.max(0.0),
                        cost,
                        raw_confidence: raw,
                        votes: None,
                        degraded_quorum: false,
                        failure: None,
                    })
                }
                Err(e) if e.is_fatal() => Err(e),
                Err(e) => Ok(StageOutcome::failed(stage.index, 0.0, e.to_string())),
            },
            StageKind::Human => Err(SolverError::Config("the human stage has no solver".into())),
        }
    }

    /// Evaluates every model stage, regardless of where routing would stop.
    pub fn evaluate_all(&self, query: &Query) -> Result<Vec<StageOutcome>, EngineError> {
        self.config
            .model_stages()
            .iter()
            .map(|s| self.evaluate_stage(query, s))
            .collect::<Result<_, _>>()
            .map_err(|source| EngineError::Aborted {
                query_id: query.id.clone(),
                source,
            })
    }

    fn route(
        &self,
        query: &Query,
        thresholds: &Thresholds,
        mut outcome_for: impl FnMut(usize, &StageSpec) -> Result<StageOutcome, SolverError>,
    ) -> Result<CascadeResult, EngineError> {
        let stages = self.config.model_stages();
        if thresholds.len() != stages.len() {
            return Err(EngineError::ThresholdMismatch {
                expected: stages.len(),
                got: thresholds.len(),
            });
        }
        let mut path = Vec::new();
        let mut total_cost = 0.0;
        for (pos, (stage, th)) in stages.iter().zip(&thresholds.stages).enumerate() {
            let outcome = outcome_for(pos, stage).map_err(|source| EngineError::Aborted {
                query_id: query.id.clone(),
                source,
            })?;
            total_cost += outcome.cost;
            let decision = stage_decision(outcome.phi, outcome.xi, th.tau_d(), th.tau_a);
            let answer = outcome.answer;
            path.push(PathStep { outcome, decision });
            match decision {
                Decision::Accept => {
                    return Ok(CascadeResult {
                        query_id: query.id.clone(),
                        final_answer: answer,
                        terminal_stage: stage.index,
                        human_terminal: false,
                        decision_path: path,
                        total_cost,
                        correct: query.gold.map(|g| answer == Some(g)),
                    })
                }
                Decision::Abstain => break,
                Decision::Defer => {}
            }
        }
        let human = self
            .config
            .stages
            .last()
            .map_or(stages.len() + 1, |s| s.index);
        Ok(CascadeResult {
            query_id: query.id.clone(),
            final_answer: query.gold,
            terminal_stage: human,
            human_terminal: true,
            decision_path: path,
            total_cost: total_cost + self.config.c_expert,
            correct: query.gold.map(|_| true),
        })
    }

    /// Routes one query, calling solvers lazily stage by stage.
    pub fn run_cascade(
        &self,
        query: &Query,
        thresholds: &Thresholds,
    ) -> Result<CascadeResult, EngineError> {
        self.route(query, thresholds, |_, stage| {
            self.evaluate_stage(query, stage)
        })
    }

    /// Routes one query over already evaluated stage outcomes.
    pub fn route_outcomes(
        &self,
        query: &Query,
        thresholds: &Thresholds,
        outcomes: &[StageOutcome],
    ) -> Result<CascadeResult, EngineError> {
        let expected = self.config.num_model_stages();
        if outcomes.len() != expected {
            return Err(EngineError::OutcomeMismatch(outcomes.len(), expected));
        }
        self.route(query, thresholds, |pos, _| Ok(outcomes[pos].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::SolverResponse;
    use std::collections::HashMap;
    use std::sync::Mutex;

    #[test]
    fn decision_examples() {
        assert_eq!(stage_decision(0.9, 0.1, 0.6, 1.5), Decision::Accept);
        assert_eq!(stage_decision(0.3, 2.0, 0.6, 1.5), Decision::Abstain);
        assert_eq!(stage_decision(0.6, 0.0, 0.6, 1.5), Decision::Defer);
        assert_eq!(stage_decision(0.9, 9.0, 0.6, 1.5), Decision::Accept);
        assert_eq!(stage_decision(0.1, 1.5, 0.6, 1.5), Decision::Defer);
    }

    #[test]
    fn cost_examples() {
        assert_eq!(stage_cost(50, 10, 5.0), 100.0);
        assert_eq!(stage_cost(0, 0, 5.0), 0.0);
        assert_eq!((0..4).map(|_| stage_cost(50, 10, 5.0)).sum::<f64>(), 400.0);
    }

    #[test]
    fn thresholds_keep_tau_equal_sigmoid_theta() {
        let t = Thresholds::uniform(4, 0.6, 1.5);
        for s in &t.stages {
            assert_eq!(s.tau_d(), sigmoid(s.theta_d));
            assert!((s.tau_d() - 0.6).abs() < 1e-15);
        }
        let mut json: serde_json::Value = serde_json::to_value(&t).unwrap();
        json["stages"][0]["tau_d"] = serde_json::json!(0.123);
        let back: Thresholds = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    /// Per-stage scripted solver: `(answer, raw confidence, raw uncertainty)` or an error.
    type Scripted = Result<(char, f64, f64), SolverError>;

    struct Script {
        by_stage: HashMap<usize, Scripted>,
        calls: Mutex<Vec<usize>>,
    }

    impl Solver for Script {
        fn solve(
            &self,
            _q: &Query,
            stage: &StageSpec,
            _j: usize,
        ) -> Result<SolverResponse, SolverError> {
            self.calls.lock().unwrap().push(stage.index);
            self.by_stage[&stage.index]
                .clone()
                .map(|(c, conf, unc)| SolverResponse {
                    answer: Label::from_char(c).unwrap(),
                    raw_confidence: conf,
                    input_tokens: 50,
                    output_tokens: 10,
                    raw_uncertainty: unc,
                })
        }
    }

    fn cascade(script: Vec<(usize, Scripted)>) -> (Cascade, Arc<Script>) {
        let s = Arc::new(Script {
            by_stage: script.into_iter().collect(),
            calls: Mutex::new(Vec::new()),
        });
        let c = Cascade::new(
            CascadeConfig::default(),
            s.clone(),
            CalibratorSet::default(),
        );
        (c, s)
    }

    /// Unanimous votes have agreement 1.0; pin multi-stage confidence low.
    fn distrust_multi(c: &mut Cascade) {
        for key in ["multi-base", "multi-large"] {
            c.calibrators.insert(
                key,
                crate::calibration::Calibrator {
                    a: 0.0,
                    b: -3.0,
                    prior_sigma: 10.0,
                    fitted_on: 1,
                },
            );
        }
    }

    fn query() -> Query {
        Query::new("q1", "p", Label::first_n(4), Label::from_char('A'), None).unwrap()
    }

    fn th() -> Thresholds {
        Thresholds::uniform(4, 0.6, 1.5)
    }

    #[test]
    fn immediate_accept_costs_stage_one_only() {
        let (c, s) = cascade(vec![(1, Ok(('A', 0.95, 0.1)))]);
        let r = c.run_cascade(&query(), &th()).unwrap();
        assert_eq!(r.terminal_stage, 1);
        assert!(!r.human_terminal);
        assert_eq!(r.total_cost, 100.0);
        assert_eq!(r.correct, Some(true));
        assert_eq!(*s.calls.lock().unwrap(), vec![1]);
    }

    #[test]
    fn all_defer_reaches_human_and_pays_expert() {
        let (mut c, _) = cascade((1..=4).map(|k| (k, Ok(('B', 0.1, 0.2)))).collect());
        distrust_multi(&mut c);
        let r = c.run_cascade(&query(), &th()).unwrap();
        assert!(r.human_terminal);
        assert_eq!(r.terminal_stage, 5);
        assert_eq!(r.correct, Some(true));
        assert_eq!(r.final_answer, Label::from_char('A'));
        // 100 + 400 + 100 + 400 + c_expert
        assert_eq!(r.total_cost, 1010.0);
        assert!(r
            .decision_path
            .iter()
            .all(|s| s.decision == Decision::Defer));
    }

    #[test]
    fn abstain_short_circuits_to_human() {
        let (c, s) = cascade(vec![(1, Ok(('B', 0.2, 5.0)))]);
        let r = c.run_cascade(&query(), &th()).unwrap();
        assert!(r.human_terminal);
        assert_eq!(r.decision_path.len(), 1);
        assert_eq!(r.decision_path[0].decision, Decision::Abstain);
        assert_eq!(r.total_cost, 110.0);
        assert_eq!(*s.calls.lock().unwrap(), vec![1]);
    }

    #[test]
    fn solver_failure_defers_with_zero_confidence() {
        let (c, _) = cascade(vec![
            (1, Err(SolverError::Network("timeout".into()))),
            (2, Ok(('A', 0.9, 0.0))),
        ]);
        let r = c.run_cascade(&query(), &th()).unwrap();
        assert_eq!(r.terminal_stage, 2);
        let first = &r.decision_path[0];
        assert_eq!(first.decision, Decision::Defer);
        assert_eq!(first.outcome.phi, 0.0);
        assert!(first.outcome.is_failure());
    }

    #[test]
    fn trace_incomplete_aborts() {
        let missing = SolverError::TraceIncomplete {
            query_id: "q1".into(),
            stage: 1,
            role: 0,
        };
        let (c, _) = cascade(vec![(1, Err(missing))]);
        assert!(matches!(
            c.run_cascade(&query(), &th()),
            Err(EngineError::Aborted { .. })
        ));
    }

    #[test]
    fn pending_expert_without_gold() {
        let (mut c, _) = cascade((1..=4).map(|k| (k, Ok(('B', 0.1, 0.2)))).collect());
        distrust_multi(&mut c);
        let q = query().without_gold();
        let r = c.run_cascade(&q, &th()).unwrap();
        assert!(r.human_terminal);
        assert_eq!(r.final_answer, None);
        assert_eq!(r.correct, None);
    }

    #[test]
    fn lazy_and_precomputed_routing_agree() {
        let (c, _) = cascade(vec![
            (1, Ok(('B', 0.3, 0.2))),
            (2, Ok(('A', 0.5, 0.3))),
            (3, Ok(('A', 0.8, 0.1))),
            (4, Ok(('A', 0.9, 0.1))),
        ]);
        let q = query();
        let all = c.evaluate_all(&q).unwrap();
        assert_eq!(
            c.run_cascade(&q, &th()).unwrap(),
            c.route_outcomes(&q, &th(), &all).unwrap()
        );
    }

    #[test]
    fn results_file_has_one_line_per_query() {
        let (c, _) = cascade(vec![(1, Ok(('A', 0.95, 0.1)))]);
        let r = c.run_cascade(&query(), &th()).unwrap();
        let mut buf = Vec::new();
        write_results(&mut buf, [&r, &r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: ResultRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.stages[0].decision, Decision::Accept);
    }
}
