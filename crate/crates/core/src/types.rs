//! Domain values shared across the cascade: answer labels, queries and stage outcomes.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Maximum number of answer choices; labels map onto `A..=Z`.
pub const MAX_CHOICES: usize = 26;

/// A multiple-choice answer label, one of `A..=Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(u8);

impl Label {
    pub fn from_index(index: usize) -> Option<Self> {
        (index < MAX_CHOICES).then_some(Label(index as u8))
    }

    pub fn from_char(c: char) -> Option<Self> {
        c.is_ascii_uppercase().then(|| Label(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    /// The first `n` labels, `A`, `B`, ...
    pub fn first_n(n: usize) -> Vec<Label> {
        (0..n.min(MAX_CHOICES)).map(|i| Label(i as u8)).collect()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::from_char(c).ok_or_else(|| format!("invalid label {s:?}")),
            _ => Err(format!("invalid label {s:?}")),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        serializer.serialize_str(self.as_char().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One multiple-choice instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

impl Query {
    /// Builds a validated query.
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        choices: Vec<Label>,
        gold: Option<Label>,
        difficulty: Option<f64>,
    ) -> Result<Self, Vec<ValidationError>> {
        let q = Query {
            id: id.into(),
            prompt: prompt.into(),
            choices,
            gold,
            difficulty,
        };
        let errors = q.validate();
        if errors.is_empty() {
            Ok(q)
        } else {
            Err(errors)
        }
    }

    pub fn validate(&self) -> Vec<ValidationError> {
        let mut errors = Vec::new();
        if self.id.is_empty() {
            errors.push(ValidationError::new("id", "must be nonempty"));
        }
        if self.choices.is_empty() {
            errors.push(ValidationError::new("choices", "must be nonempty"));
        }
        if self.choices.len() > MAX_CHOICES {
            errors.push(ValidationError::new(
                "choices",
                format!("at most {MAX_CHOICES} choices are supported"),
            ));
        }
        let mut seen = HashSet::new();
        for (i, c) in self.choices.iter().enumerate() {
            if !seen.insert(*c) {
                errors.push(ValidationError::new(
                    format!("choices[{i}]"),
                    format!("duplicate label {c}"),
                ));
            }
        }
        if let Some(gold) = self.gold {
            if !self.choices.contains(&gold) {
                errors.push(ValidationError::new(
                    "gold",
                    format!("{gold} is not among the choices"),
                ));
            }
        }
        if let Some(d) = self.difficulty {
            if !(0.0..=1.0).contains(&d) {
                errors.push(ValidationError::new("difficulty", "must lie in [0, 1]"));
            }
        }
        errors
    }

    pub fn has_choice(&self, label: Label) -> bool {
        self.choices.contains(&label)
    }

    /// Position of `label` in the choice order.
    pub fn choice_position(&self, label: Label) -> Option<usize> {
        self.choices.iter().position(|c| *c == label)
    }

    /// A copy without the gold label, as presented to solvers and experts.
    pub fn without_gold(&self) -> Query {
        Query {
            gold: None,
            ..self.clone()
        }
    }
}

/// What a single stage produced for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    /// Stage index `k` (1-based).
    pub stage: usize,
    /// `None` only when the stage failed.
    pub answer: Option<Label>,
    /// Calibrated confidence.
    pub phi: f64,
    /// Uncertainty.
    pub xi: f64,
    pub cost: f64,
    pub raw_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<Label>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded_quorum: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl StageOutcome {
    /// Outcome recorded for a stage whose solver failed: no answer, zero confidence.
    pub fn failed(stage: usize, cost: f64, reason: impl Into<String>) -> Self {
        StageOutcome {
            stage,
            answer: None,
            phi: 0.0,
            xi: 0.0,
            cost,
            raw_confidence: 0.0,
            votes: None,
            degraded_quorum: false,
            failure: Some(reason.into()),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}
