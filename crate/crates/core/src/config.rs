//! Flat run configuration shared by generation, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config at {pointer:?}: {message}")]
    Parse { pointer: String, message: String },
    #[error("invalid config value at \"/{key}\": {message}")]
    Invalid { key: &'static str, message: String },
}

/// How negative queries are projected off the shared-prototype subspace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Orthonormalize the fused prototypes first and project with `Bᵀ B`.
    Orthonormal,
    /// Project with the raw fused prototypes, `q - q Cᵀ C`.
    Literal,
}

/// Every tunable constant of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // scenes
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub base_dim: usize,
    pub attr_dim: usize,
    pub feature_noise: f64,
    pub count_min: usize,
    pub count_max: usize,
    pub distractor_min: usize,
    pub distractor_max: usize,
    pub attribute_separation: f64,
    pub families: usize,
    pub attributes: usize,
    pub kernel_sigma: f64,
    pub world_seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    // model
    pub queries: usize,
    pub heads: usize,
    pub prototypes: usize,
    /// Number of negative-exclusive references; 0 means `ceil(queries / 8)`.
    pub exclusive: usize,
    pub dropout: f64,
    pub projection: ProjectionMode,
    pub prototype_residual: bool,
    pub refine_null_slot: bool,

    // training
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub lambda_cls: f64,
    pub lambda_share: f64,
    pub lambda_div: f64,
    pub lambda_den: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Probability that a training scene carries positive exemplars.
    pub p_pos_exemplars: f64,
    /// Probability that a training scene carries a negative text prompt.
    pub p_neg_text: f64,
    /// Probability that a training scene carries negative exemplars.
    pub p_neg_exemplars: f64,
    /// Probability that a training scene is used with its two target roles exchanged.
    pub p_swap: f64,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            grid_rows: 64,
            grid_cols: 64,
            base_dim: 24,
            attr_dim: 8,
            feature_noise: 0.05,
            count_min: 5,
            count_max: 60,
            distractor_min: 0,
            distractor_max: 10,
            attribute_separation: 0.2,
            families: 8,
            attributes: 6,
            kernel_sigma: 1.0,
            world_seed: 2024,
            split_train: 0.70,
            split_val: 0.15,
            split_test: 0.15,

            queries: 100,
            heads: 4,
            prototypes: 8,
            exclusive: 0,
            dropout: 0.1,
            projection: ProjectionMode::Orthonormal,
            prototype_residual: false,
            refine_null_slot: true,

            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            lambda_cls: 5.0,
            lambda_share: 2.0,
            lambda_div: 0.01,
            lambda_den: 200.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            p_pos_exemplars: 0.5,
            p_neg_text: 0.5,
            p_neg_exemplars: 0.25,
            p_swap: 0.5,
            threads: 0,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = e.path().iter().map(|seg| format!("/{seg}")).collect::<String>();
            ConfigError::Parse { pointer, message: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn feature_dim(&self) -> usize {
        self.base_dim + self.attr_dim
    }

    /// Resolved number of negative-exclusive references.
    pub fn exclusive_count(&self) -> usize {
        if self.exclusive == 0 {
            self.queries.div_ceil(8)
        } else {
            self.exclusive
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, message: &str| Err(ConfigError::Invalid { key, message: message.to_string() });
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return invalid("grid_rows", "grid must be non-empty");
        }
        if self.attr_dim < 3 {
            return invalid("attr_dim", "attribute ring needs at least 3 dimensions");
        }
        if self.base_dim < 1 {
            return invalid("base_dim", "must be positive");
        }
        if self.count_min < 1 || self.count_min > self.count_max {
            return invalid("count_min", "need 1 <= count_min <= count_max");
        }
        if self.distractor_min > self.distractor_max {
            return invalid("distractor_min", "need distractor_min <= distractor_max");
        }
        if self.families < 2 {
            return invalid("families", "need at least two families for distractors");
        }
        if self.attributes < 3 {
            return invalid("attributes", "need at least three attribute variants");
        }
        if !(self.attribute_separation >= 0.0) {
            return invalid("attribute_separation", "must be non-negative");
        }
        if !(self.kernel_sigma > 0.0) {
            return invalid("kernel_sigma", "must be positive");
        }
        if !(self.feature_noise >= 0.0) {
            return invalid("feature_noise", "must be non-negative");
        }
        let split = self.split_train + self.split_val + self.split_test;
        if self.split_train < 0.0 || self.split_val < 0.0 || self.split_test < 0.0 || (split - 1.0).abs() > 1e-9 {
            return invalid("split_train", "split ratios must be non-negative and sum to 1");
        }
        if self.queries < 1 {
            return invalid("queries", "need at least one query");
        }
        if self.heads == 0 || self.feature_dim() % self.heads != 0 {
            return invalid("heads", "feature dimension must be divisible by heads");
        }
        if self.prototypes < 1 || self.prototypes > self.feature_dim() {
            return invalid("prototypes", "need 1 <= prototypes <= feature dimension");
        }
        if self.exclusive_count() > self.queries {
            return invalid("exclusive", "cannot select more references than queries");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout", "must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be positive");
        }
        for (key, p) in [
            ("p_pos_exemplars", self.p_pos_exemplars),
            ("p_neg_text", self.p_neg_text),
            ("p_neg_exemplars", self.p_neg_exemplars),
            ("p_swap", self.p_swap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(key, "probability must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.exclusive_count(), 13);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = Config::from_json(r#"{"steps": 5, "projection": "literal"}"#).unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.projection, ProjectionMode::Literal);
        assert_eq!(cfg.queries, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_json(r#"{"stepz": 5}"#), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn type_errors_name_the_offending_key() {
        match Config::from_json(r#"{"steps": "many"}"#) {
            Err(ConfigError::Parse { pointer, .. }) => assert_eq!(pointer, "/steps"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prototypes_above_dim_are_rejected() {
        let cfg = Config { prototypes: 64, ..Config::default() };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { key: "prototypes", .. })));
    }
}
