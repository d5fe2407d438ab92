//! Cascade configuration: stage layout, hyperparameters and validation.
//!
//! Configs are stored as TOML. Defaults reproduce the five-stage layout
//! `Single(Base) -> Multi(Base) -> Single(Large) -> Multi(Large) -> Human`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, ValidationError, ValidationErrors};
use crate::roles;

/// Environment variable that overrides [`CascadeConfig::seed`].
pub const SEED_ENV: &str = "CASCADEFER_SEED";

pub const DEFAULT_AGENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    Base,
    Large,
}

impl fmt::Display for ModelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelScale::Base => "base",
            ModelScale::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Single,
    Multi,
    Human,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Single => "single",
            StageKind::Multi => "multi",
            StageKind::Human => "human",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: usize,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ModelScale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roles: Vec<String>,
}

impl StageSpec {
    pub fn single(index: usize, scale: ModelScale) -> Self {
        StageSpec {
            index,
            kind: StageKind::Single,
            scale: Some(scale),
            n_agents: None,
            roles: Vec::new(),
        }
    }

    pub fn multi(index: usize, scale: ModelScale, roles: Vec<String>) -> Self {
        StageSpec {
            index,
            kind: StageKind::Multi,
            scale: Some(scale),
            n_agents: Some(roles.len()),
            roles,
        }
    }

    pub fn human(index: usize) -> Self {
        StageSpec {
            index,
            kind: StageKind::Human,
            scale: None,
            n_agents: None,
            roles: Vec::new(),
        }
    }

    /// Number of solver calls the stage issues (0 for Human).
    pub fn agents(&self) -> usize {
        match self.kind {
            StageKind::Single => 1,
            StageKind::Multi => self.n_agents.unwrap_or(DEFAULT_AGENTS),
            StageKind::Human => 0,
        }
    }

    pub fn is_human(&self) -> bool {
        self.kind == StageKind::Human
    }

    /// Short name such as `multi-base`; also the calibrator key.
    pub fn label(&self) -> String {
        match self.scale {
            Some(s) => format!("{}-{}", self.kind, s),
            None => self.kind.to_string(),
        }
    }
}

/// How the loss charges cost to stopping at stage `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Cost of reaching and running stage `k`: sum of all stage costs up to `k`.
    #[default]
    Cumulative,
    /// Cost of stage `k` alone.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub seed: u64,
    /// Soft-gate sharpness.
    pub gamma: f64,
    /// Cost weight in the threshold loss.
    pub lambda: f64,
    /// Output-to-input token price ratio.
    pub rho: f64,
    pub c_expert: f64,
    /// Initial deferral threshold for every model stage.
    pub init_tau: f64,
    /// Abstention threshold on uncertainty, held fixed during learning.
    pub tau_a: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub calibration_samples: usize,
    pub prior_sigma: f64,
    pub cost_mode: CostMode,
    pub stages: Vec<StageSpec>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        let roles = roles::builtin("arc").expect("builtin role set");
        CascadeConfig {
            seed: 0,
            gamma: 5.0,
            lambda: 1e-7,
            rho: 5.0,
            c_expert: 10.0,
            init_tau: 0.6,
            tau_a: 1.5,
            learning_rate: 0.05,
            batch_size: 10,
            buffer_capacity: 1_000,
            calibration_samples: 100,
            prior_sigma: 10.0,
            cost_mode: CostMode::Cumulative,
            stages: vec![
                StageSpec::single(1, ModelScale::Base),
                StageSpec::multi(2, ModelScale::Base, roles.clone()),
                StageSpec::single(3, ModelScale::Large),
                StageSpec::multi(4, ModelScale::Large, roles),
                StageSpec::human(5),
            ],
        }
    }
}

fn check(errors: &mut Vec<ValidationError>, ok: bool, path: &str, message: &str) {
    if !ok {
        errors.push(ValidationError::new(path, message));
    }
}

impl CascadeConfig {
    /// Model (non-Human) stages, in order.
    pub fn model_stages(&self) -> &[StageSpec] {
        match self.stages.split_last() {
            Some((last, rest)) if last.is_human() => rest,
            _ => &self.stages,
        }
    }

    pub fn num_model_stages(&self) -> usize {
        self.model_stages().len()
    }

    /// Every violated invariant; empty when the config is valid.
    pub fn violations(&self) -> Vec<ValidationError> {
        let mut errors = Vec::new();
        let e = &mut errors;
        check(
            e,
            self.seed <= i64::MAX as u64,
            "seed",
            "must fit in a signed 64-bit integer",
        );
        check(
            e,
            self.gamma.is_finite() && self.gamma > 0.0,
            "gamma",
            "must be positive",
        );
        check(
            e,
            self.lambda.is_finite() && self.lambda >= 0.0,
            "lambda",
            "must be nonnegative",
        );
        check(
            e,
            self.rho.is_finite() && self.rho > 0.0,
            "rho",
            "must be positive",
        );
        check(
            e,
            self.c_expert.is_finite() && self.c_expert > 0.0,
            "c_expert",
            "must be positive",
        );
        check(
            e,
            self.init_tau > 0.0 && self.init_tau < 1.0,
            "init_tau",
            "must lie in (0, 1)",
        );
        check(e, self.tau_a >= 0.0, "tau_a", "must be nonnegative");
        check(
            e,
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate",
            "must be positive",
        );
        check(e, self.batch_size > 0, "batch_size", "must be positive");
        check(
            e,
            self.buffer_capacity >= self.batch_size,
            "buffer_capacity",
            "must be at least batch_size",
        );
        check(
            e,
            self.calibration_samples > 0,
            "calibration_samples",
            "must be positive",
        );
        check(
            e,
            self.prior_sigma.is_finite() && self.prior_sigma > 0.0,
            "prior_sigma",
            "must be positive",
        );

        if self.stages.is_empty() {
            e.push(ValidationError::new("stages", "must be nonempty"));
            return errors;
        }
        let last = self.stages.len() - 1;
        if !self.stages[last].is_human() {
            e.push(ValidationError::new("stages", "last stage must be Human"));
        }
        if last == 0 {
            e.push(ValidationError::new(
                "stages",
                "at least one model stage is required",
            ));
        }
        let mut prev_index = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            let p = |field: &str| format!("stages[{i}].{field}");
            if stage.index <= prev_index {
                e.push(ValidationError::new(
                    p("index"),
                    "stage indices must be positive and strictly increasing",
                ));
            }
            prev_index = stage.index;
            match stage.kind {
                StageKind::Human => {
                    if i != last {
                        e.push(ValidationError::new(p("kind"), "Human must be final stage"));
                    }
                    if stage.scale.is_some() {
                        e.push(ValidationError::new(
                            p("scale"),
                            "Human stage has no model scale",
                        ));
                    }
                    if !stage.roles.is_empty() || stage.n_agents.is_some() {
                        e.push(ValidationError::new(
                            p("roles"),
                            "Human stage has no agents or roles",
                        ));
                    }
                }
                StageKind::Single => {
                    if stage.scale.is_none() {
                        e.push(ValidationError::new(
                            p("scale"),
                            "model stage requires a scale",
                        ));
                    }
                    if !stage.roles.is_empty() || stage.n_agents.is_some() {
                        e.push(ValidationError::new(
                            p("roles"),
                            "Single stage has no agents or roles",
                        ));
                    }
                }
                StageKind::Multi => {
                    if stage.scale.is_none() {
                        e.push(ValidationError::new(
                            p("scale"),
                            "model stage requires a scale",
                        ));
                    }
                    let n = stage.n_agents.unwrap_or(DEFAULT_AGENTS);
                    if n == 0 {
                        e.push(ValidationError::new(p("n_agents"), "must be positive"));
                    }
                    if stage.roles.len() != n {
                        e.push(ValidationError::new(
                            p("roles"),
                            format!("roles length ≠ N ({} roles, N = {n})", stage.roles.len()),
                        ));
                    }
                }
            }
        }
        errors
    }

    /// Returns the config unchanged when valid, otherwise every violation.
    pub fn validate(self) -> Result<CascadeConfig, ValidationErrors> {
        let errors = self.violations();
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(ValidationErrors(errors))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<CascadeConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<CascadeConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_toml_str(&text)?.validate()?)
    }

    /// Applies `CASCADEFER_SEED` when set.
    pub fn apply_env_overrides(mut self) -> Result<CascadeConfig, ConfigError> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seed = value.trim().parse().map_err(|_| ConfigError::Env {
                var: SEED_ENV,
                value,
            })?;
        }
        Ok(self)
    }
}

/// Free-function form of [`CascadeConfig::validate`].
pub fn validate_config(config: CascadeConfig) -> Result<CascadeConfig, ValidationErrors> {
    config.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_five_stage_config_is_valid() {
        let cfg = validate_config(CascadeConfig::default()).unwrap();
        let kinds: Vec<_> = cfg.stages.iter().map(|s| s.label()).collect();
        assert_eq!(
            kinds,
            [
                "single-base",
                "multi-base",
                "single-large",
                "multi-large",
                "human"
            ]
        );
        assert_eq!(cfg.num_model_stages(), 4);
        assert_eq!(cfg.gamma, 5.0);
        assert_eq!(cfg.lambda, 1e-7);
        assert_eq!(cfg.rho, 5.0);
        assert_eq!(cfg.c_expert, 10.0);
        assert_eq!(cfg.init_tau, 0.6);
        assert_eq!(cfg.learning_rate, 0.05);
        assert_eq!(cfg.batch_size, 10);
        assert_eq!(cfg.calibration_samples, 100);
    }

    #[test]
    fn human_first_is_rejected() {
        let mut cfg = CascadeConfig::default();
        cfg.stages.rotate_right(1);
        for (i, s) in cfg.stages.iter_mut().enumerate() {
            s.index = i + 1;
        }
        let errs = cfg.validate().unwrap_err().0;
        assert!(errs
            .iter()
            .any(|e| e.message == "Human must be final stage" && e.path == "stages[0].kind"));
        assert!(errs.iter().any(|e| e.message == "last stage must be Human"));
    }

    #[test]
    fn multi_role_count_mismatch_is_rejected() {
        let mut cfg = CascadeConfig::default();
        cfg.stages[1].n_agents = Some(4);
        cfg.stages[1].roles.pop();
        let errs = cfg.validate().unwrap_err().0;
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "stages[1].roles");
        assert!(errs[0].message.starts_with("roles length ≠ N"));
    }

    #[test]
    fn aggregates_every_violation() {
        let cfg = CascadeConfig {
            gamma: -1.0,
            init_tau: 1.0,
            batch_size: 0,
            stages: vec![StageSpec::single(1, ModelScale::Base)],
            ..CascadeConfig::default()
        };
        let paths: Vec<_> = cfg.violations().into_iter().map(|e| e.path).collect();
        assert!(paths.contains(&"gamma".to_string()));
        assert!(paths.contains(&"init_tau".to_string()));
        assert!(paths.contains(&"batch_size".to_string()));
        assert!(paths.contains(&"stages".to_string()));
    }

    #[test]
    fn non_increasing_indices_rejected() {
        let mut cfg = CascadeConfig::default();
        cfg.stages[2].index = 2;
        let errs = cfg.violations();
        assert_eq!(errs[0].path, "stages[2].index");
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = CascadeConfig::from_toml_str("seed = 9\nlambda = 0.001\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lambda, 1e-3);
        assert_eq!(cfg.stages.len(), 5);
        assert!(CascadeConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn infinite_abstention_threshold_survives_toml() {
        let cfg = CascadeConfig {
            tau_a: f64::INFINITY,
            ..CascadeConfig::default()
        };
        let back = CascadeConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    fn arb_config() -> impl Strategy<Value = CascadeConfig> {
        let stage = (any::<bool>(), any::<bool>(), 1usize..6);
        (
            0..=i64::MAX as u64,
            0.1f64..20.0,
            0.0f64..1.0,
            0.01f64..0.99,
            1usize..50,
            proptest::collection::vec(stage, 1..6),
            any::<bool>(),
        )
            .prop_map(|(seed, gamma, lambda, tau, batch, stages, marginal)| {
                let mut specs: Vec<StageSpec> = stages
                    .into_iter()
                    .enumerate()
                    .map(|(i, (multi, large, n))| {
                        let scale = if large {
                            ModelScale::Large
                        } else {
                            ModelScale::Base
                        };
                        if multi {
                            StageSpec::multi(
                                i + 1,
                                scale,
                                (0..n).map(|j| format!("role {j}")).collect(),
                            )
                        } else {
                            StageSpec::single(i + 1, scale)
                        }
                    })
                    .collect();
                specs.push(StageSpec::human(specs.len() + 1));
                CascadeConfig {
                    seed,
                    gamma,
                    lambda,
                    init_tau: tau,
                    batch_size: batch,
                    buffer_capacity: batch * 10,
                    cost_mode: if marginal {
                        CostMode::Marginal
                    } else {
                        CostMode::Cumulative
                    },
                    stages: specs,
                    ..CascadeConfig::default()
                }
            })
    }

    proptest! {
        #[test]
        fn valid_configs_round_trip_and_revalidate(cfg in arb_config()) {
            let cfg = cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            let back = CascadeConfig::from_toml_str(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert!(back.validate().unwrap().violations().is_empty());
        }
    }
}
