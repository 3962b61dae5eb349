//! Experiment configuration.
//!
//! Configurations are JSON documents; every field has a default, so a file
//! only needs the values it changes:
//!
//! ```json
//! {"experiment_id": "pilot", "enabled_feedback_types": ["comparative"], "comparison_slots": 2}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{EnvError, GridSpec, DEFAULT_MAP_NAME};
use crate::rationality::{calibration_schedule, CalibrationSettings};
use crate::reward_model::{FeatureKind, LossWeights, ModelKind, TrainOptions};
use crate::sampler::SamplerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Evaluative,
    Comparative,
    Corrective,
    Demonstrative,
    Descriptive,
}

impl FeedbackKind {
    pub const ALL: [FeedbackKind; 5] = [
        FeedbackKind::Evaluative,
        FeedbackKind::Comparative,
        FeedbackKind::Corrective,
        FeedbackKind::Demonstrative,
        FeedbackKind::Descriptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackKind::Evaluative => "evaluative",
            FeedbackKind::Comparative => "comparative",
            FeedbackKind::Corrective => "corrective",
            FeedbackKind::Demonstrative => "demonstrative",
            FeedbackKind::Descriptive => "descriptive",
        }
    }
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
    /// Number of selectable values; 2 means a binary rating.
    pub steps: u32,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale {
            min: 1.0,
            max: 5.0,
            steps: 5,
        }
    }
}

impl RatingScale {
    /// Affine map of `[min, max]` onto `[-1, 1]`.
    pub fn to_score(&self, value: f64) -> f64 {
        2.0 * (value - self.min) / (self.max - self.min) - 1.0
    }

    /// Nearest selectable raw value for a score in `[-1, 1]`.
    pub fn from_score(&self, score: f64) -> f64 {
        let raw = self.min + (score.clamp(-1.0, 1.0) + 1.0) / 2.0 * (self.max - self.min);
        if self.steps < 2 {
            return raw;
        }
        let step = (self.max - self.min) / f64::from(self.steps - 1);
        (self.min + ((raw - self.min) / step).round() * step).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSettings {
    pub model: ModelKind,
    pub features: FeatureKind,
    pub weights: LossWeights,
    pub train: TrainOptions,
    /// Hinge margin of the descriptive loss.
    pub margin: f64,
}

impl Default for RewardSettings {
    fn default() -> Self {
        RewardSettings {
            model: ModelKind::Linear,
            features: FeatureKind::OnehotCell,
            weights: LossWeights::default(),
            train: TrainOptions::default(),
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UiOptions {
    pub show_quality_widget: bool,
    pub instructions: String,
}

/// Episodes generated into an empty buffer when an experiment is created.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSettings {
    /// Rollouts per skill-ladder policy.
    pub per_level: usize,
    /// Ground-truth episodes for the calibration pool, when calibration is on.
    pub calibration_episodes: usize,
    pub seed: u64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            per_level: 60,
            calibration_episodes: 42,
            seed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Built-in fixture name. Ignored when `map_path` is set.
    pub env: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_path: Option<PathBuf>,
    /// Episode store directory. The service defaults it to a directory under
    /// its store root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_path: Option<PathBuf>,
    pub enabled_feedback_types: BTreeSet<FeedbackKind>,
    pub rating_scale: RatingScale,
    pub comparison_slots: usize,
    pub sampler: SamplerMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSettings>,
    /// Feedback items per training-progress phase.
    pub progress_phase_length: u64,
    /// Default optimality stamped on demonstrations.
    pub demo_optimality: f64,
    pub reward_model: RewardSettings,
    pub ui: UiOptions,
    pub pool: PoolSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: String::new(),
            env: DEFAULT_MAP_NAME.into(),
            map_path: None,
            buffer_path: None,
            enabled_feedback_types: FeedbackKind::ALL.into_iter().collect(),
            rating_scale: RatingScale::default(),
            comparison_slots: 2,
            sampler: SamplerMode::Random { seed: 0 },
            calibration: None,
            progress_phase_length: 100,
            demo_optimality: 1.0,
            reward_model: RewardSettings::default(),
            ui: UiOptions::default(),
            pool: PoolSettings::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn is_enabled(&self, kind: FeedbackKind) -> bool {
        self.enabled_feedback_types.contains(&kind)
    }

    pub fn grid_spec(&self) -> Result<GridSpec, EnvError> {
        match &self.map_path {
            Some(p) => GridSpec::load_map(p),
            None => GridSpec::fixture(&self.env),
        }
    }

    /// Sampler a new session starts with: the calibration schedule around
    /// `sampler` when calibration is configured, `sampler` otherwise.
    pub fn session_sampler(&self) -> SamplerMode {
        match &self.calibration {
            Some(c) => match calibration_schedule(c, &self.sampler) {
                Ok(schedule) => SamplerMode::StateMachine { schedule },
                Err(_) => self.sampler.clone(),
            },
            None => self.sampler.clone(),
        }
    }

    /// Checks everything that can be checked without touching the store.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let id = &self.experiment_id;
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ConfigError::new(
                "experiment_id",
                "must be non-empty and use only letters, digits, '-' and '_'",
            ));
        }
        self.grid_spec()
            .map_err(|e| ConfigError::new(if self.map_path.is_some() { "map_path" } else { "env" }, e.to_string()))?;
        if self.enabled_feedback_types.is_empty() {
            return Err(ConfigError::new("enabled_feedback_types", "no feedback type enabled"));
        }
        if self.is_enabled(FeedbackKind::Comparative) && self.comparison_slots < 2 {
            return Err(ConfigError::new(
                "comparison_slots",
                format!("comparative feedback needs at least 2 slots, got {}", self.comparison_slots),
            ));
        }
        let s = self.rating_scale;
        if !(s.min.is_finite() && s.max.is_finite() && s.min < s.max) {
            return Err(ConfigError::new("rating_scale", "min must be below max"));
        }
        if s.steps < 2 {
            return Err(ConfigError::new("rating_scale.steps", "at least 2 steps required"));
        }
        if !(0.0..=1.0).contains(&self.demo_optimality) {
            return Err(ConfigError::new("demo_optimality", "must lie in [0, 1]"));
        }
        if self.progress_phase_length == 0 {
            return Err(ConfigError::new("progress_phase_length", "must be positive"));
        }
        let w = &self.reward_model.weights;
        let ws = [w.evaluative, w.comparative, w.instructive, w.descriptive];
        if ws.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ConfigError::new("reward_model.weights", "weights must be finite and non-negative"));
        }
        if ws.iter().all(|x| *x == 0.0) {
            return Err(ConfigError::new("reward_model.weights", "at least one weight must be positive"));
        }
        let t = &self.reward_model.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(ConfigError::new("reward_model.train.lr", "must be positive"));
        }
        if t.batch == 0 {
            return Err(ConfigError::new("reward_model.train.batch", "must be positive"));
        }
        if !(t.l2.is_finite() && t.l2 >= 0.0) {
            return Err(ConfigError::new("reward_model.train.l2", "must be non-negative"));
        }
        if !(self.reward_model.margin.is_finite() && self.reward_model.margin >= 0.0) {
            return Err(ConfigError::new("reward_model.margin", "must be non-negative"));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.reward_model.model {
            return Err(ConfigError::new("reward_model.model.hidden", "must be positive"));
        }
        if self.pool.per_level == 0 {
            return Err(ConfigError::new("pool.per_level", "must be positive"));
        }
        if let Some(c) = &self.calibration {
            calibration_schedule(c, &self.sampler).map_err(|e| ConfigError::new("calibration", e.0))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig {
            experiment_id: "pilot".into(),
            enabled_feedback_types: [FeedbackKind::Comparative].into_iter().collect(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn minimal_comparative_config_is_valid() {
        assert_eq!(minimal().validate(), Ok(()));
    }

    #[test]
    fn one_slot_rejected_for_comparative() {
        let cfg = ExperimentConfig {
            comparison_slots: 1,
            ..minimal()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "comparison_slots");
    }

    #[test]
    fn sparse_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"experiment_id":"x","enabled_feedback_types":["evaluative"]}"#).unwrap();
        assert_eq!(cfg.env, DEFAULT_MAP_NAME);
        assert_eq!(cfg.rating_scale, RatingScale::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn likert_mapping() {
        let s = RatingScale::default();
        assert_eq!(s.to_score(4.0), 0.5);
        assert_eq!(s.to_score(3.0), 0.0);
        assert_eq!(s.to_score(1.0), -1.0);
        assert_eq!(s.to_score(5.0), 1.0);
        assert_eq!(s.from_score(0.4), 4.0);
    }

    #[test]
    fn bad_experiment_id() {
        let cfg = ExperimentConfig {
            experiment_id: "../etc".into(),
            ..minimal()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "experiment_id");
    }
}
