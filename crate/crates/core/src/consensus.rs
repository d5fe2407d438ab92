//! Multi-agent stages: role-conditioned calls aggregated by majority vote.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratorSet;
use crate::config::{StageKind, StageSpec};
use crate::engine::{stage_cost, StageError};
use crate::math::entropy;
use crate::solvers::{Solver, SolverError, SolverResponse};
use crate::types::{Label, Query, StageOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSet {
    pub votes: Vec<Label>,
    /// `(input_tokens, output_tokens)` per vote.
    pub per_vote_cost: Vec<(u64, u64)>,
}

impl VoteSet {
    pub fn new(votes: Vec<Label>) -> Self {
        let per_vote_cost = vec![(0, 0); votes.len()];
        VoteSet {
            votes,
            per_vote_cost,
        }
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

fn counts(votes: &[Label]) -> [usize; crate::types::MAX_CHOICES] {
    let mut c = [0usize; crate::types::MAX_CHOICES];
    for v in votes {
        c[v.index()] += 1;
    }
    c
}

/// Label with the most votes; ties go to the label listed first in `choice_order`.
/// Returns `None` for an empty vote list.
pub fn majority_vote(votes: &[Label], choice_order: &[Label]) -> Option<Label> {
    let c = counts(votes);
    let rank = |l: &Label| {
        choice_order
            .iter()
            .position(|x| x == l)
            .unwrap_or(choice_order.len() + l.index())
    };
    let mut best: Option<Label> = None;
    for v in votes {
        best = match best {
            None => Some(*v),
            Some(b) => {
                let (cv, cb) = (c[v.index()], c[b.index()]);
                if cv > cb || (cv == cb && rank(v) < rank(&b)) {
                    Some(*v)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Fraction of votes equal to `mv`.
pub fn agreement_confidence(votes: &[Label], mv: Label) -> f64 {
    if votes.is_empty() {
        return 0.0;
    }
    votes.iter().filter(|v| **v == mv).count() as f64 / votes.len() as f64
}

/// Shannon entropy (nats) of the empirical vote distribution; 0 iff unanimous.
pub fn vote_dispersion(votes: &[Label]) -> f64 {
    let n = votes.len() as f64;
    entropy(
        counts(votes)
            .iter()
            .filter(|c| **c > 0)
            .map(|c| *c as f64 / n),
    )
}

fn call_agents(
    query: &Query,
    stage: &StageSpec,
    backend: &dyn Solver,
) -> Vec<Result<SolverResponse, SolverError>> {
    let n = stage.agents();
    if backend.concurrent_agents() && n > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|j| s.spawn(move || backend.solve(query, stage, j)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(SolverError::Config("agent call panicked".into())))
                })
                .collect()
        })
    } else {
        (0..n).map(|j| backend.solve(query, stage, j)).collect()
    }
}

/// Runs every role of a multi-agent stage and aggregates the votes.
///
/// When some agents fail, the vote proceeds over the successes only if they
/// form a strict majority of the `N` agents; the outcome is then flagged
/// `degraded_quorum`.
pub fn run_multi_stage(
    query: &Query,
    stage: &StageSpec,
    backend: &dyn Solver,
    calibrators: &CalibratorSet,
    rho: f64,
) -> Result<StageOutcome, StageError> {
    debug_assert_eq!(stage.kind, StageKind::Multi);
    let n = stage.agents();
    let mut votes = VoteSet {
        votes: Vec::with_capacity(n),
        per_vote_cost: Vec::with_capacity(n),
    };
    let mut failures = Vec::new();
    for (j, result) in call_agents(query, stage, backend).into_iter().enumerate() {
        match result {
            Ok(r) if query.has_choice(r.answer) => {
                votes.votes.push(r.answer);
                votes.per_vote_cost.push((r.input_tokens, r.output_tokens));
            }
            Ok(r) => failures.push(format!(
                "agent {j}: answer {} is not a valid choice",
                r.answer
            )),
            Err(e) if e.is_fatal() => return Err(StageError::Fatal(e)),
            Err(e) => failures.push(format!("agent {j}: {e}")),
        }
    }
    let cost: f64 = votes
        .per_vote_cost
        .iter()
        .map(|&(i, o)| stage_cost(i, o, rho))
        .sum();
    if votes.len() * 2 <= n {
        return Err(StageError::Failed {
            reason: format!(
                "no quorum: {} of {n} agents succeeded ({})",
                votes.len(),
                failures.join("; ")
            ),
            cost,
        });
    }
    let mv = majority_vote(&votes.votes, &query.choices).expect("quorum implies votes");
    let raw = agreement_confidence(&votes.votes, mv);
    Ok(StageOutcome {
        stage: stage.index,
        answer: Some(mv),
        phi: calibrators.calibrate(&stage.label(), raw),
        xi: vote_dispersion(&votes.votes),
        cost,
        raw_confidence: raw,
        votes: Some(votes.votes),
        degraded_quorum: !failures.is_empty(),
        failure: None,
    })
}
