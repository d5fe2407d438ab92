//! Reference synthetic scenario used by the benchmarks.
//!
//! Base models fall from 0.9 to 0.1 accuracy across the difficulty range
//! (mean 0.50 under uniform difficulty), large models from 1.0 to 0.6
//! (mean 0.80). Agent correlation is set so a four-agent vote gains about
//! five points over a single call. Raw confidences are informative but
//! overconfident. Token counts are large enough that the default `lambda`
//! trades a few points of accuracy against a full escalation.

use super::workload::{DifficultyDist, WorkloadSpec};
use crate::config::CascadeConfig;
use crate::solvers::{BetaShape, MockSolverSpec, PiecewiseLinear};

pub const BASE_VOTE_CORRELATION: f64 = 0.6;
pub const LARGE_VOTE_CORRELATION: f64 = 0.6;

pub fn base_spec() -> MockSolverSpec {
    MockSolverSpec {
        accuracy: PiecewiseLinear::linear(0.9, 0.1),
        conf_correct: BetaShape::new(10.0, 1.0),
        conf_wrong: BetaShape::new(3.0, 2.0),
        vote_correlation: BASE_VOTE_CORRELATION,
        tokens_in: 60_000,
        tokens_out: 12_000,
    }
}

pub fn large_spec() -> MockSolverSpec {
    MockSolverSpec {
        accuracy: PiecewiseLinear::linear(1.0, 0.6),
        conf_correct: BetaShape::new(10.0, 1.0),
        conf_wrong: BetaShape::new(3.0, 2.0),
        vote_correlation: LARGE_VOTE_CORRELATION,
        tokens_in: 60_000,
        tokens_out: 18_000,
    }
}

/// Raw confidence nearly independent of correctness and centred high.
pub fn overconfident_spec() -> MockSolverSpec {
    MockSolverSpec {
        accuracy: PiecewiseLinear::constant(0.6),
        conf_correct: BetaShape::new(8.0, 2.0),
        conf_wrong: BetaShape::new(8.0, 2.0),
        vote_correlation: 0.0,
        tokens_in: 500,
        tokens_out: 100,
    }
}

fn workload(difficulty: DifficultyDist, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        n_queries: 1000,
        difficulty,
        choices: 4,
        base: base_spec(),
        large: large_spec(),
        seed,
    }
}

/// Mixed-difficulty stream.
pub fn reference_workload(seed: u64) -> WorkloadSpec {
    workload(DifficultyDist::Uniform, seed)
}

pub fn easy_workload(seed: u64) -> WorkloadSpec {
    workload(DifficultyDist::point(0.1), seed)
}

pub fn hard_workload(seed: u64) -> WorkloadSpec {
    workload(DifficultyDist::point(0.9), seed)
}

pub fn reference_config(seed: u64) -> CascadeConfig {
    CascadeConfig {
        seed,
        ..CascadeConfig::default()
    }
}
