//! Synthetic annotators with a known rationality coefficient per feedback type.
//!
//! Comparative, corrective and demonstrative feedback follow the Boltzmann
//! choice model over ground-truth utilities. Evaluative scores add Gaussian
//! noise with `σ = 1/(1+β)`; descriptive masks include each salient cell
//! with probability `β/(1+β)` and each other floor cell with probability
//! `1/(4(1+β))`. Both are modelling choices, picked so that β = 0 is
//! maximally noisy and large β is exact.
//!
//! Every event carries `effective_beta`, `feedback_type` and
//! `progress_phase` in its metadata.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{FeedbackKind, RatingScale};
use crate::encoding::Target;
use crate::gridworld::{sample_index, Action, Cell, EpisodeRecord, GridSpec, Tile, ValueTable};
use crate::rationality::{boltzmann_prob, ChoiceContext, ChoiceObservation};
use crate::translator::{EventPayload, RawFeedbackEvent};

/// Metadata keys stamped on simulated events.
pub const META_EFFECTIVE_BETA: &str = "effective_beta";
pub const META_FEEDBACK_TYPE: &str = "feedback_type";
pub const META_PROGRESS_PHASE: &str = "progress_phase";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mean_ms: f64,
    pub jitter_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            mean_ms: 1500.0,
            jitter_ms: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub user_id: String,
    /// Types without an entry are treated as β = 0.
    pub beta_by_type: BTreeMap<FeedbackKind, f64>,
    /// Per-phase multipliers; phases past the end reuse the last one.
    #[serde(default)]
    pub progress_multipliers: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub latency: LatencyModel,
    /// Round evaluative ratings to the configured scale steps.
    #[serde(default)]
    pub likert: bool,
}

impl AnnotatorProfile {
    /// Same β for every feedback type.
    pub fn uniform(user_id: &str, beta: f64, seed: u64) -> Self {
        AnnotatorProfile {
            user_id: user_id.into(),
            beta_by_type: FeedbackKind::ALL.into_iter().map(|k| (k, beta)).collect(),
            progress_multipliers: Vec::new(),
            seed,
            latency: LatencyModel::default(),
            likert: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some((k, b)) = self.beta_by_type.iter().find(|(_, b)| b.is_nan() || **b < 0.0) {
            return Err(format!("β for {k} is {b}, must be ≥ 0"));
        }
        if let Some(m) = self.progress_multipliers.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(format!("progress multiplier {m} must be positive"));
        }
        Ok(())
    }
}

pub struct SimulatedAnnotator {
    profile: AnnotatorProfile,
    rng: ChaCha8Rng,
    session_id: String,
    clock_ms: i64,
    /// Current training-progress phase.
    pub phase: usize,
}

impl SimulatedAnnotator {
    pub fn new(profile: AnnotatorProfile, session_id: &str) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        SimulatedAnnotator {
            profile,
            rng,
            session_id: session_id.into(),
            clock_ms: 1_700_000_000_000,
            phase: 0,
        }
    }

    pub fn profile(&self) -> &AnnotatorProfile {
        &self.profile
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// `beta_by_type[kind]` times the current phase multiplier.
    pub fn effective_beta(&self, kind: FeedbackKind) -> f64 {
        let base = self.profile.beta_by_type.get(&kind).copied().unwrap_or(0.0);
        let mult = match self.profile.progress_multipliers.as_slice() {
            [] => 1.0,
            m => m[self.phase.min(m.len() - 1)],
        };
        base * mult
    }

    pub fn choice_context(&self, kind: FeedbackKind, task_id: &str) -> ChoiceContext {
        ChoiceContext {
            feedback_type: kind.name().into(),
            task_id: task_id.into(),
            progress_phase: self.phase as u32,
            user_id: self.profile.user_id.clone(),
        }
    }

    fn event(&mut self, kind: FeedbackKind, ui_element: &str, payload: EventPayload) -> RawFeedbackEvent {
        let lat = self.profile.latency;
        let latency = (lat.mean_ms + lat.jitter_ms * self.rng.random_range(-1.0..=1.0)).max(0.0) as u64;
        self.clock_ms += latency as i64;
        let mut meta = BTreeMap::new();
        meta.insert(META_EFFECTIVE_BETA.into(), serde_json::json!(self.effective_beta(kind)));
        meta.insert(META_FEEDBACK_TYPE.into(), serde_json::json!(kind.name()));
        meta.insert(META_PROGRESS_PHASE.into(), serde_json::json!(self.phase));
        RawFeedbackEvent {
            session_id: self.session_id.clone(),
            user_id: self.profile.user_id.clone(),
            ui_element: ui_element.into(),
            client_timestamp: self.clock_ms,
            latency_ms: latency,
            confidence: None,
            free_text: None,
            meta,
            payload,
        }
    }

    /// Boltzmann choice among options with the given utilities.
    pub fn choose(&mut self, utilities: &[f64], beta: f64) -> usize {
        sample_index(&boltzmann_prob(utilities, beta), &mut self.rng)
    }

    /// Best-first order by repeated Boltzmann choice among the remaining options.
    pub fn rank(&mut self, utilities: &[f64], beta: f64) -> Vec<usize> {
        let mut left: Vec<usize> = (0..utilities.len()).collect();
        let mut order = Vec::with_capacity(left.len());
        while !left.is_empty() {
            let u: Vec<f64> = left.iter().map(|&i| utilities[i]).collect();
            order.push(left.remove(self.choose(&u, beta)));
        }
        order
    }

    /// Ranking event over targets with known ground-truth returns.
    pub fn annotate_comparative(&mut self, options: &[(Target, f64)]) -> RawFeedbackEvent {
        let beta = self.effective_beta(FeedbackKind::Comparative);
        let utils: Vec<f64> = options.iter().map(|(_, u)| *u).collect();
        let order = self.rank(&utils, beta);
        let targets = order.iter().map(|&i| options[i].0.clone()).collect();
        self.event(
            FeedbackKind::Comparative,
            "ranking-board",
            EventPayload::Ranking { targets, ranks: None },
        )
    }

    /// Noisy score for a normalized ground truth, as `(clamped, unclamped)`.
    pub fn evaluative_score(&mut self, normalized_truth: f64) -> (f64, f64) {
        let beta = self.effective_beta(FeedbackKind::Evaluative);
        let sigma = 1.0 / (1.0 + beta);
        let noise = if sigma.is_finite() && sigma > 0.0 {
            Normal::new(0.0, sigma).expect("positive sigma").sample(&mut self.rng)
        } else {
            0.0
        };
        let raw = normalized_truth + noise;
        (raw.clamp(-1.0, 1.0), raw)
    }

    /// Rating of an episode: mean ground-truth step reward divided by the
    /// largest step-reward magnitude, plus noise, mapped onto `scale`.
    pub fn annotate_evaluative(
        &mut self,
        target: Target,
        episode: &EpisodeRecord,
        spec: &GridSpec,
        scale: RatingScale,
    ) -> RawFeedbackEvent {
        let mean = episode.gt_rewards.iter().sum::<f64>() / episode.len().max(1) as f64;
        let (score, _) = self.evaluative_score(mean / spec.max_abs_step_reward());
        let value = if self.profile.likert {
            scale.from_score(score)
        } else {
            (scale.min + (score + 1.0) / 2.0 * (scale.max - scale.min)).clamp(scale.min, scale.max)
        };
        self.event(
            FeedbackKind::Evaluative,
            "rating-slider",
            EventPayload::Rating {
                target,
                value,
                scale: Some((scale.min, scale.max)),
            },
        )
    }

    /// Replacement action sampled from `exp(β·Q*)`.
    pub fn corrective_action(&mut self, q: &[f64; 4]) -> Action {
        let beta = self.effective_beta(FeedbackKind::Corrective);
        Action::ALL[self.choose(q, beta)]
    }

    /// Correction of step `step`, or `None` when the sampled action matches
    /// the logged one.
    pub fn annotate_corrective(
        &mut self,
        episode: &EpisodeRecord,
        step: usize,
        values: &ValueTable,
    ) -> Option<RawFeedbackEvent> {
        let q = values.q_values(episode.states[step].cell);
        let a = self.corrective_action(&q);
        if a == episode.actions[step] {
            return None;
        }
        Some(self.event(
            FeedbackKind::Corrective,
            "correction-control",
            EventPayload::Correction {
                episode: episode.id.clone(),
                step: step as u32,
                actions: vec![a],
            },
        ))
    }

    /// Actions of a Boltzmann rollout from the start cell.
    pub fn demonstration_actions(&mut self, spec: &GridSpec, values: &ValueTable) -> Vec<Action> {
        let beta = self.effective_beta(FeedbackKind::Demonstrative);
        let mut cell = spec.start;
        let mut actions = Vec::new();
        for _ in 0..spec.max_steps {
            let a = Action::ALL[self.choose(&values.q_values(cell), beta)];
            actions.push(a);
            cell = spec.move_target(cell, a);
            if spec.is_terminal(cell) {
                break;
            }
        }
        actions
    }

    pub fn annotate_demonstrative(&mut self, spec: &GridSpec, values: &ValueTable) -> RawFeedbackEvent {
        let actions = self.demonstration_actions(spec, values);
        self.event(
            FeedbackKind::Demonstrative,
            "demo-control",
            EventPayload::Demonstration {
                actions,
                optimality: None,
            },
        )
    }

    /// Mask for one salient group with the noise model above.
    pub fn descriptive_mask(&mut self, spec: &GridSpec, salient: &[Cell]) -> Vec<Cell> {
        let beta = self.effective_beta(FeedbackKind::Descriptive);
        let (p_hit, p_false) = if beta.is_infinite() {
            (1.0, 0.0)
        } else {
            (beta / (1.0 + beta), 1.0 / (4.0 * (1.0 + beta)))
        };
        let mut out = Vec::new();
        for c in spec.cells() {
            let p = if salient.contains(&c) {
                p_hit
            } else if spec.tile(c) == Tile::Floor {
                p_false
            } else {
                continue;
            };
            if self.rng.random::<f64>() < p {
                out.push(c);
            }
        }
        out
    }

    /// One brush event for the goal (+1) and one for lava (-1); empty masks
    /// produce no event.
    pub fn annotate_descriptive(&mut self, spec: &GridSpec, target: Target) -> Vec<RawFeedbackEvent> {
        let lava: Vec<Cell> = spec.lava.iter().copied().collect();
        let groups = [(vec![spec.goal], 1.0), (lava, -1.0)];
        let mut out = Vec::new();
        for (salient, sign) in groups {
            let cells = self.descriptive_mask(spec, &salient);
            if cells.is_empty() {
                continue;
            }
            out.push(self.event(
                FeedbackKind::Descriptive,
                "brush-tool",
                EventPayload::Brush {
                    target: target.clone(),
                    cells: Some(cells),
                    polygon: None,
                    sign,
                    annotation: None,
                },
            ));
        }
        out
    }

    /// Pairwise choice observation between two options with known utilities.
    pub fn pairwise_choice(&mut self, u0: f64, u1: f64, task_id: &str) -> ChoiceObservation {
        let beta = self.effective_beta(FeedbackKind::Comparative);
        let chosen = self.choose(&[u0, u1], beta);
        ChoiceObservation {
            utilities: vec![u0, u1],
            chosen,
            context: self.choice_context(FeedbackKind::Comparative, task_id),
        }
    }
}
