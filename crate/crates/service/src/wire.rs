//! Request and response bodies. All are JSON; feedback submissions and log
//! exports are newline-delimited JSON.

use std::collections::BTreeMap;

use feedback_core::analysis::ConsistencyRow;
use feedback_core::config::{ExperimentConfig, FeedbackKind};
use feedback_core::encoding::EpisodeId;
use feedback_core::gridworld::{Action, Cell, GridSpec, Termination};
use feedback_core::reward_model::TrainLogEntry;
use feedback_core::sampler::BatchSource;
use serde::{Deserialize, Serialize};

use crate::error::ErrorBody;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedExperiment {
    pub experiment_id: String,
    pub buffer_episodes: usize,
}

/// Configuration plus the resolved environment, for client-side simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentView {
    pub config: ExperimentConfig,
    pub env: GridSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    /// Anonymous token; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub user_id: String,
    pub experiment_id: String,
    pub feedback_count: u64,
    pub phase: u32,
    /// Mode that will serve the next batch.
    pub sampler_mode: String,
}

/// Per-step playback data of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPayload {
    pub episode_id: EpisodeId,
    /// Agent cell before each step, then the final cell.
    pub states: Vec<Cell>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub n_steps: usize,
    pub total_return: f64,
    pub terminated: Termination,
    pub labeled_count: u64,
    pub flagged: bool,
    /// Steps whose action differs from the latest model's greedy action.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hints: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub mode: String,
    pub source: BatchSource,
    pub phase: u32,
    pub episodes: Vec<RenderPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EventResult {
    Accepted {
        index: usize,
        feedback_ids: Vec<u64>,
    },
    Rejected {
        index: usize,
        error: ErrorBody,
    },
}

impl EventResult {
    pub fn feedback_ids(&self) -> &[u64] {
        match self {
            EventResult::Accepted { feedback_ids, .. } => feedback_ids,
            EventResult::Rejected { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub results: Vec<EventResult>,
}

impl SubmitResponse {
    pub fn accepted_ids(&self) -> Vec<u64> {
        self.results
            .iter()
            .flat_map(|r| r.feedback_ids().iter().copied())
            .collect()
    }

    pub fn rejected(&self) -> usize {
        self.results
            .iter()
            .filter(|r| matches!(r, EventResult::Rejected { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    /// Overrides the configured training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Episodes to roll out under the new snapshot and add to the buffer.
    pub mint_episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCounts {
    pub evaluative: usize,
    pub comparative: usize,
    pub demonstrations: usize,
    pub corrections: usize,
    pub descriptive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    /// Log prefix the snapshot was trained on.
    pub log_bytes: u64,
    pub log_records: u64,
    pub seed: u64,
    pub items: ItemCounts,
    /// Final objective; per-type entries only for active terms.
    pub final_loss: TrainLogEntry,
    pub spearman_vs_vstar: Option<f64>,
    pub policy_return: f64,
    pub optimal_return: f64,
    pub return_ratio: f64,
    pub minted_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub snapshot_id: String,
    pub metrics: TrainingMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub experiment_id: String,
    pub log_records: u64,
    pub log_bytes: u64,
    pub sessions: usize,
    pub buffer_episodes: usize,
    pub counts_by_kind: BTreeMap<FeedbackKind, usize>,
    pub consistency: Vec<ConsistencyRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest_snapshot: Option<TrainingResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: EpisodeId,
    pub skill_level: u64,
    pub total_return: f64,
    pub episode_len: usize,
    pub labeled_count: u64,
    pub flagged: bool,
    /// Per-episode loss under the latest snapshot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Top decile by loss among episodes with feedback.
    pub high_impact: bool,
}
