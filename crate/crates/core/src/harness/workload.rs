//! Synthetic multiple-choice query streams.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, ValidationError, ValidationErrors};
use crate::math::derive_seed;
use crate::solvers::{MockBackend, MockSolverSpec};
use crate::types::{Label, Query, MAX_CHOICES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPoint {
    pub difficulty: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DifficultyDist {
    Uniform,
    /// Discrete mixture of point masses.
    Mix {
        points: Vec<MixPoint>,
    },
}

impl DifficultyDist {
    pub fn point(difficulty: f64) -> Self {
        DifficultyDist::Mix {
            points: vec![MixPoint {
                difficulty,
                weight: 1.0,
            }],
        }
    }

    pub fn two_point(easy: f64, hard: f64, easy_weight: f64) -> Self {
        DifficultyDist::Mix {
            points: vec![
                MixPoint {
                    difficulty: easy,
                    weight: easy_weight,
                },
                MixPoint {
                    difficulty: hard,
                    weight: 1.0 - easy_weight,
                },
            ],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            DifficultyDist::Uniform => rng.random(),
            DifficultyDist::Mix { points } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for p in points {
                    acc += p.weight;
                    if u < acc {
                        return p.difficulty;
                    }
                }
                points.last().map_or(0.5, |p| p.difficulty)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    pub difficulty: DifficultyDist,
    #[serde(default = "default_choices")]
    pub choices: usize,
    pub base: MockSolverSpec,
    pub large: MockSolverSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_queries() -> usize {
    1000
}

fn default_choices() -> usize {
    4
}

impl WorkloadSpec {
    pub fn violations(&self) -> Vec<ValidationError> {
        let mut errors = Vec::new();
        if self.n_queries == 0 {
            errors.push(ValidationError::new("n_queries", "must be at least 1"));
        }
        if !(2..=MAX_CHOICES).contains(&self.choices) {
            errors.push(ValidationError::new(
                "choices",
                format!("must be between 2 and {MAX_CHOICES}"),
            ));
        }
        if let DifficultyDist::Mix { points } = &self.difficulty {
            if points.is_empty() {
                errors.push(ValidationError::new(
                    "difficulty.points",
                    "needs at least one point",
                ));
            }
            for (i, p) in points.iter().enumerate() {
                if !(0.0..=1.0).contains(&p.difficulty) {
                    errors.push(ValidationError::new(
                        format!("difficulty.points[{i}].difficulty"),
                        "must lie in [0, 1]",
                    ));
                }
                if p.weight.is_nan() || p.weight < 0.0 {
                    errors.push(ValidationError::new(
                        format!("difficulty.points[{i}].weight"),
                        "must be nonnegative",
                    ));
                }
            }
            let total: f64 = points.iter().map(|p| p.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                errors.push(ValidationError::new(
                    "difficulty.points",
                    format!("weights sum to {total}, expected 1"),
                ));
            }
        }
        errors.extend(self.base.violations("base"));
        errors.extend(self.large.violations("large"));
        errors
    }

    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let errors = self.violations();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errors))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let spec: WorkloadSpec =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        spec.validate().map_err(ConfigError::Invalid)?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Mock backend answering this workload's queries.
    pub fn backend(&self) -> MockBackend {
        MockBackend {
            base: self.base.clone(),
            large: self.large.clone(),
            seed: self.seed,
        }
    }
}

/// Deterministic labeled query stream for `spec`.
///
/// Query `i` depends only on `(seed, i)`, so a longer stream extends a shorter one.
pub fn synthetic_workload(spec: &WorkloadSpec) -> Vec<Query> {
    let choices = Label::first_n(spec.choices);
    (0..spec.n_queries)
        .map(|i| {
            let mut rng = ChaCha8Rng::from_seed(derive_seed(
                spec.seed,
                &[b"workload", &(i as u64).to_le_bytes()],
            ));
            let difficulty = spec.difficulty.sample(&mut rng);
            let gold = choices[rng.random_range(0..choices.len())];
            Query {
                id: format!("q{i:05}"),
                prompt: format!("synthetic question {i}"),
                choices: choices.clone(),
                gold: Some(gold),
                difficulty: Some(difficulty),
            }
        })
        .collect()
}
