//! Seeded synthetic solvers standing in for base and large models.
//!
//! Every draw is a pure function of `(seed, query id, stage, role)`. Agents of
//! the same stage share a latent draw per query: with probability
//! `vote_correlation` an agent reuses the shared latent, otherwise it uses its
//! own. Each agent is still correct with probability `accuracy(difficulty)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{answer_entropy, derive_seed, Solver, SolverError, SolverResponse};
use crate::config::{ModelScale, StageSpec};
use crate::error::ValidationError;
use crate::types::Query;

/// Piecewise-linear map on `[0, 1]`, given as sorted `(x, y)` knots.
/// Constant beyond the outer knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiecewiseLinear(pub Vec<(f64, f64)>);

impl PiecewiseLinear {
    pub fn constant(y: f64) -> Self {
        PiecewiseLinear(vec![(0.0, y)])
    }

    pub fn linear(y0: f64, y1: f64) -> Self {
        PiecewiseLinear(vec![(0.0, y0), (1.0, y1)])
    }

    pub fn eval(&self, x: f64) -> f64 {
        let knots = &self.0;
        let (first, last) = match (knots.first(), knots.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return 0.0,
        };
        if x <= first.0 {
            return first.1;
        }
        if x >= last.0 {
            return last.1;
        }
        for w in knots.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                if x1 == x0 {
                    return y1;
                }
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        last.1
    }

    fn validate(&self, path: &str, errors: &mut Vec<ValidationError>) {
        if self.0.is_empty() {
            errors.push(ValidationError::new(path, "needs at least one knot"));
        }
        for (i, (x, y)) in self.0.iter().enumerate() {
            if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                errors.push(ValidationError::new(
                    format!("{path}[{i}]"),
                    "knots must lie in [0, 1]",
                ));
            }
        }
        if self.0.windows(2).any(|w| w[1].0 < w[0].0) {
            errors.push(ValidationError::new(path, "knots must be sorted by x"));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaShape {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        BetaShape { alpha, beta }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSolverSpec {
    /// Difficulty to probability of a correct answer.
    pub accuracy: PiecewiseLinear,
    pub conf_correct: BetaShape,
    pub conf_wrong: BetaShape,
    pub vote_correlation: f64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl MockSolverSpec {
    pub fn violations(&self, path: &str) -> Vec<ValidationError> {
        let mut errors = Vec::new();
        self.accuracy
            .validate(&format!("{path}.accuracy"), &mut errors);
        for (name, shape) in [
            ("conf_correct", self.conf_correct),
            ("conf_wrong", self.conf_wrong),
        ] {
            if !(shape.alpha > 0.0
                && shape.beta > 0.0
                && shape.alpha.is_finite()
                && shape.beta.is_finite())
            {
                errors.push(ValidationError::new(
                    format!("{path}.{name}"),
                    "Beta shapes must be positive",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.vote_correlation) {
            errors.push(ValidationError::new(
                format!("{path}.vote_correlation"),
                "must lie in [0, 1]",
            ));
        }
        errors
    }
}

/// Uniform draws backing one agent slot.
struct Latent {
    correct_u: f64,
    wrong_u: f64,
}

fn latent(rng: &mut ChaCha8Rng) -> Latent {
    Latent {
        correct_u: rng.random(),
        wrong_u: rng.random(),
    }
}

/// One synthetic solver call for agent `role_index` of stage `stage_index`.
pub fn mock_solve(
    query: &Query,
    spec: &MockSolverSpec,
    seed: u64,
    stage_index: usize,
    role_index: usize,
) -> Result<SolverResponse, SolverError> {
    let gold = query
        .gold
        .ok_or_else(|| SolverError::Config(format!("query {} has no gold label", query.id)))?;
    let difficulty = query
        .difficulty
        .ok_or_else(|| SolverError::Config(format!("query {} has no difficulty", query.id)))?;
    let gold_pos = query
        .choice_position(gold)
        .ok_or_else(|| SolverError::Config(format!("query {} gold not among choices", query.id)))?;

    let qid = query.id.as_bytes();
    let k = (stage_index as u64).to_le_bytes();
    let j = (role_index as u64).to_le_bytes();
    let mut shared_rng = ChaCha8Rng::from_seed(derive_seed(seed, &[b"mock-shared", qid, &k]));
    let mut own_rng = ChaCha8Rng::from_seed(derive_seed(seed, &[b"mock-agent", qid, &k, &j]));

    let shared = latent(&mut shared_rng);
    let own = latent(&mut own_rng);
    let use_shared = own_rng.random::<f64>() < spec.vote_correlation;
    let draw = if use_shared { shared } else { own };

    let accuracy = spec.accuracy.eval(difficulty).clamp(0.0, 1.0);
    let n = query.choices.len();
    let correct = draw.correct_u < accuracy || n == 1;
    let answer = if correct {
        gold
    } else {
        let slot = ((draw.wrong_u * (n - 1) as f64) as usize).min(n - 2);
        let pos = if slot >= gold_pos { slot + 1 } else { slot };
        query.choices[pos]
    };

    let shape = if correct {
        spec.conf_correct
    } else {
        spec.conf_wrong
    };
    let beta = Beta::new(shape.alpha, shape.beta)
        .map_err(|e| SolverError::Config(format!("invalid Beta shape: {e}")))?;
    let raw_confidence = beta.sample(&mut own_rng).clamp(0.0, 1.0);

    Ok(SolverResponse {
        answer,
        raw_confidence,
        input_tokens: spec.tokens_in,
        output_tokens: spec.tokens_out,
        raw_uncertainty: answer_entropy(accuracy, n),
    })
}

/// Mock backend: one spec per model scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBackend {
    pub base: MockSolverSpec,
    pub large: MockSolverSpec,
    pub seed: u64,
}

impl MockBackend {
    pub fn spec(&self, scale: ModelScale) -> &MockSolverSpec {
        match scale {
            ModelScale::Base => &self.base,
            ModelScale::Large => &self.large,
        }
    }
}

impl Solver for MockBackend {
    fn solve(
        &self,
        query: &Query,
        stage: &StageSpec,
        role_index: usize,
    ) -> Result<SolverResponse, SolverError> {
        let scale = stage.scale.ok_or_else(|| {
            SolverError::Config(format!("stage {} has no model scale", stage.index))
        })?;
        mock_solve(query, self.spec(scale), self.seed, stage.index, role_index)
    }
}
