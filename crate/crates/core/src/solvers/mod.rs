//! Stage-solver backends.
//!
//! A [`Solver`] answers one query for one agent slot `(stage k, role j)` and
//! reports a raw confidence signal, a raw uncertainty, and token usage.
//! Backends: [`mock`] (seeded synthetic models), [`replay`] (frozen traces)
//! and [`remote`] (an OpenAI-style chat-completion endpoint).

pub mod mock;
pub mod remote;
pub mod replay;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StageSpec;
pub(crate) use crate::math::derive_seed;
use crate::types::{Label, Query};

pub use mock::{mock_solve, BetaShape, MockBackend, MockSolverSpec, PiecewiseLinear};
pub use remote::{parse_answer, EndpointConfig, RemoteBackend};
pub use replay::{ReplayBackend, TraceRecord, TraceStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResponse {
    pub answer: Label,
    pub raw_confidence: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub raw_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("solver misconfigured: {0}")]
    Config(String),
    #[error("trace incomplete: no record for (query {query_id}, stage {stage}, role {role})")]
    TraceIncomplete {
        query_id: String,
        stage: usize,
        role: usize,
    },
    #[error("network failure: {0}")]
    Network(String),
    #[error("unparseable answer: {0:?}")]
    UnparseableAnswer(String),
    #[error("missing probability data: {0}")]
    MissingProbability(String),
    #[error("invalid endpoint response: {0}")]
    InvalidResponse(String),
}

impl SolverError {
    /// Errors that must abort the query instead of turning into a deferral.
    pub fn is_fatal(&self) -> bool {
        matches!(self, SolverError::TraceIncomplete { .. })
    }
}

pub trait Solver: Send + Sync {
    fn solve(
        &self,
        query: &Query,
        stage: &StageSpec,
        role_index: usize,
    ) -> Result<SolverResponse, SolverError>;

    /// Whether the agent calls of a multi-agent stage should be issued concurrently.
    fn concurrent_agents(&self) -> bool {
        false
    }
}

impl<S: Solver + ?Sized> Solver for std::sync::Arc<S> {
    fn solve(
        &self,
        query: &Query,
        stage: &StageSpec,
        role_index: usize,
    ) -> Result<SolverResponse, SolverError> {
        (**self).solve(query, stage, role_index)
    }

    fn concurrent_agents(&self) -> bool {
        (**self).concurrent_agents()
    }
}

/// Entropy of the answer distribution that puts `p_top` on the chosen label
/// and spreads the rest uniformly over the other `n_choices - 1` labels.
pub fn answer_entropy(p_top: f64, n_choices: usize) -> f64 {
    let p = p_top.clamp(0.0, 1.0);
    if n_choices <= 1 {
        return 0.0;
    }
    let rest = (1.0 - p) / (n_choices - 1) as f64;
    crate::math::entropy(std::iter::once(p).chain(std::iter::repeat_n(rest, n_choices - 1)))
}
