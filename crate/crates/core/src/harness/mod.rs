//! Stream execution and benchmark reports.
//!
//! [`run_stream`] fits calibrators on the head of a labeled stream, then
//! routes the rest either with fixed thresholds or while learning them online.

pub mod reference;
pub mod report;
pub mod workload;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{fit_calibrator, CalibrationSample, CalibratorSet};
use crate::config::CascadeConfig;
use crate::engine::{Cascade, CascadeResult, EngineError, Thresholds};
use crate::error::ValidationErrors;
use crate::optimizer::{FeedbackRecord, OnlineOptimizer, StageFeedback, UpdateOutcome};
use crate::solvers::Solver;
use crate::types::{Query, StageOutcome};

pub use report::{emit_report, parse_report, ReportFormat};
pub use workload::{synthetic_workload, DifficultyDist, MixPoint, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fixed,
    Online,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Config(#[from] ValidationErrors),
    #[error("query {0} has no gold label")]
    Unlabeled(String),
    #[error("stream of {got} queries is too short for {needed} calibration samples")]
    TooShort { got: usize, needed: usize },
    #[error("pareto sweep needs at least two lambda values")]
    SweepTooSmall,
    #[error("I/O error on {path}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format {
        path: std::path::PathBuf,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: usize,
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Queries consumed for calibration and left out of every metric below.
    pub calibration_queries: usize,
    pub n_queries: usize,
    /// Running mean accuracy after each reported query.
    pub accuracy_curve: Vec<f64>,
    pub final_accuracy: f64,
    pub mean_cost: f64,
    /// Mean cost of answering every query with stage 1 alone.
    pub stage1_mean_cost: f64,
    pub cost_multiple: f64,
    pub histogram: Vec<StageCount>,
    pub expert_load: f64,
    pub trajectory: Vec<UpdateOutcome>,
    pub final_taus: Vec<f64>,
    pub stage_failures: u64,
    pub skipped_updates: u64,
}

impl StreamReport {
    pub fn stage_share(&self, stage: usize) -> f64 {
        let n = self
            .histogram
            .iter()
            .find(|c| c.stage == stage)
            .map_or(0, |c| c.count);
        n as f64 / self.n_queries.max(1) as f64
    }
}

/// Everything a stream run produces.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub report: StreamReport,
    pub results: Vec<CascadeResult>,
    pub calibrators: CalibratorSet,
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_fingerprint(config: &CascadeConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Fits one calibrator per model stage from fully evaluated labeled queries.
pub fn fit_stream_calibrators(
    config: &CascadeConfig,
    backend: Arc<dyn Solver>,
    queries: &[Query],
) -> Result<CalibratorSet, HarnessError> {
    let raw = Cascade::new(config.clone(), backend, CalibratorSet::default());
    let stages = config.model_stages();
    let mut samples: Vec<Vec<CalibrationSample>> = vec![Vec::new(); stages.len()];
    for q in queries {
        let gold = q
            .gold
            .ok_or_else(|| HarnessError::Unlabeled(q.id.clone()))?;
        for (i, o) in raw.evaluate_all(q)?.into_iter().enumerate() {
            if !o.is_failure() {
                samples[i].push(CalibrationSample::new(
                    o.raw_confidence,
                    o.answer == Some(gold),
                ));
            }
        }
    }
    let mut set = CalibratorSet::default();
    for (stage, s) in stages.iter().zip(&samples) {
        if s.is_empty() {
            tracing::warn!(
                stage = stage.index,
                "no calibration samples; passing raw confidence through"
            );
            continue;
        }
        set.insert(stage.label(), fit_calibrator(s, config.prior_sigma));
    }
    Ok(set)
}

pub fn feedback_record(query: &Query, outcomes: &[StageOutcome]) -> Option<FeedbackRecord> {
    let gold = query.gold?;
    Some(FeedbackRecord {
        query_id: query.id.clone(),
        stages: outcomes
            .iter()
            .map(|o| StageFeedback {
                phi: o.phi,
                correct: o.answer == Some(gold),
                cost: o.cost,
            })
            .collect(),
    })
}

/// Runs a labeled stream. The first `calibration_samples` queries fit the
/// calibrators and are excluded from the report.
pub fn run_stream(
    queries: &[Query],
    config: &CascadeConfig,
    mode: Mode,
    backend: Arc<dyn Solver>,
) -> Result<StreamRun, HarnessError> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(ValidationErrors(violations).into());
    }
    let needed = config.calibration_samples;
    if queries.len() <= needed {
        return Err(HarnessError::TooShort {
            got: queries.len(),
            needed,
        });
    }
    if let Some(q) = queries.iter().find(|q| q.gold.is_none()) {
        return Err(HarnessError::Unlabeled(q.id.clone()));
    }
    let (head, stream) = queries.split_at(needed);
    let calibrators = fit_stream_calibrators(config, backend.clone(), head)?;
    let cascade = Cascade::new(config.clone(), backend, calibrators.clone());

    let mut optimizer = OnlineOptimizer::new(config);
    let fixed = Thresholds::from_config(config);
    let mut results = Vec::with_capacity(stream.len());
    let mut trajectory = Vec::new();
    let mut failures = 0u64;

    for q in stream {
        let result = match mode {
            Mode::Fixed => {
                let r = cascade.run_cascade(q, &fixed)?;
                failures += r
                    .decision_path
                    .iter()
                    .filter(|s| s.outcome.is_failure())
                    .count() as u64;
                r
            }
            Mode::Online => {
                let outcomes = cascade.evaluate_all(q)?;
                failures += outcomes.iter().filter(|o| o.is_failure()).count() as u64;
                let r = cascade.route_outcomes(q, optimizer.thresholds(), &outcomes)?;
                optimizer.push(feedback_record(q, &outcomes).expect("labeled"));
                if let Some(u) = optimizer.online_update() {
                    trajectory.push(u);
                }
                r
            }
        };
        results.push(result);
    }

    let final_taus = match mode {
        Mode::Fixed => fixed.taus(),
        Mode::Online => optimizer.thresholds().taus(),
    };
    let report = summarize(
        config,
        mode,
        needed,
        &results,
        trajectory,
        final_taus,
        failures,
        optimizer.skipped(),
    );
    tracing::info!(
        ?mode,
        accuracy = report.final_accuracy,
        mean_cost = report.mean_cost,
        expert_load = report.expert_load,
        "stream finished"
    );
    Ok(StreamRun {
        report,
        results,
        calibrators,
    })
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    config: &CascadeConfig,
    mode: Mode,
    calibration_queries: usize,
    results: &[CascadeResult],
    trajectory: Vec<UpdateOutcome>,
    final_taus: Vec<f64>,
    stage_failures: u64,
    skipped_updates: u64,
) -> StreamReport {
    let n = results.len();
    let mut correct = 0usize;
    let accuracy_curve = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            correct += usize::from(r.correct == Some(true));
            correct as f64 / (i + 1) as f64
        })
        .collect::<Vec<_>>();
    let mean_cost = results.iter().map(|r| r.total_cost).sum::<f64>() / n as f64;
    let stage1_mean_cost = results
        .iter()
        .map(|r| r.decision_path.first().map_or(0.0, |s| s.outcome.cost))
        .sum::<f64>()
        / n as f64;
    let histogram = config
        .stages
        .iter()
        .map(|s| StageCount {
            stage: s.index,
            label: s.label(),
            count: results
                .iter()
                .filter(|r| r.terminal_stage == s.index)
                .count(),
        })
        .collect::<Vec<_>>();
    let human = results.iter().filter(|r| r.human_terminal).count();
    StreamReport {
        mode,
        seed: config.seed,
        config_fingerprint: config_fingerprint(config),
        calibration_queries,
        n_queries: n,
        final_accuracy: accuracy_curve.last().copied().unwrap_or(0.0),
        accuracy_curve,
        mean_cost,
        stage1_mean_cost,
        cost_multiple: if stage1_mean_cost > 0.0 {
            mean_cost / stage1_mean_cost
        } else {
            0.0
        },
        histogram,
        expert_load: human as f64 / n as f64,
        trajectory,
        final_taus,
        stage_failures,
        skipped_updates,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub mean_cost: f64,
    pub final_accuracy: f64,
    pub expert_load: f64,
}

/// One independent online run per `lambda`, points sorted by cost.
/// Runs execute on separate threads.
pub fn pareto_sweep(
    lambdas: &[f64],
    base: &CascadeConfig,
    queries: &[Query],
    backend: Arc<dyn Solver>,
) -> Result<Vec<ParetoPoint>, HarnessError> {
    if lambdas.len() < 2 {
        return Err(HarnessError::SweepTooSmall);
    }
    let runs: Vec<Result<ParetoPoint, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .map(|&lambda| {
                let config = CascadeConfig {
                    lambda,
                    ..base.clone()
                };
                let backend = backend.clone();
                scope.spawn(move || {
                    let run = run_stream(queries, &config, Mode::Online, backend)?;
                    Ok(ParetoPoint {
                        lambda,
                        mean_cost: run.report.mean_cost,
                        final_accuracy: run.report.final_accuracy,
                        expert_load: run.report.expert_load,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut points = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| {
        a.mean_cost
            .total_cmp(&b.mean_cost)
            .then(a.lambda.total_cmp(&b.lambda))
    });
    Ok(points)
}
