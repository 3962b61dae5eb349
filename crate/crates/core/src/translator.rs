//! Raw UI events to standard-encoded feedback records.
//!
//! Each [`RawFeedbackEvent`] carries an `event_kind` and a kind-specific
//! `payload`:
//!
//! | event_kind      | payload                                                   |
//! |-----------------|-----------------------------------------------------------|
//! | `rating`        | `target`, `value`, optional `scale: [min, max]`           |
//! | `ranking`       | `targets` best first, optional `ranks` (ties share a rank) |
//! | `correction`    | `episode`, `step`, `actions` (replacement then continuation) |
//! | `demonstration` | `actions` from the start cell, optional `optimality`      |
//! | `brush`         | `target`, `cells` or `polygon`, `sign` (±1), `annotation` |
//!
//! Polygons are in cell units; a cell is brushed when its center lies inside
//! the polygon (even-odd rule).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, EpisodeSource, SegmentView};
use crate::config::{ExperimentConfig, FeedbackKind};
use crate::encoding::{
    validate_feedback, Actuality, ContentLevel, EpisodeCatalog, EpisodeId, FeatureMask, FeedbackContent,
    FeedbackMeta, FeedbackTypeTag, Granularity, InstructedAction, Intention, Relation, StandardizedFeedback, Target,
    TargetScope, Violation, ORIGIN_GENERATED,
};
use crate::gridworld::{episode_from_actions, replay, Action, Cell, EpisodeRecord, GridSpec, Observation};

/// `source_kind` of episodes recorded from human demonstrations.
pub const DEMO_SOURCE_KIND: &str = "human-demo";
/// `policy_id` of human demonstrations.
pub const DEMO_POLICY_ID: u64 = 3;
/// Demonstrations are stored at the top of the skill scale.
pub const DEMO_SKILL_LEVEL: u64 = 1000;

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("feedback type {0} is disabled for this experiment")]
    DisabledFeedbackType(FeedbackKind),
    #[error("unknown targets: {}", .0.join(", "))]
    UnknownTargets(Vec<String>),
    #[error("rating {value} outside scale [{min}, {max}]")]
    ScaleError { value: f64, min: f64, max: f64 },
    #[error("ranking has no targets")]
    EmptyRanking,
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("replay failed: {0}")]
    ReplayError(String),
    #[error("record is not relative")]
    NotRelative,
    #[error("record failed validation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    Rating {
        target: Target,
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<(f64, f64)>,
    },
    Ranking {
        targets: Vec<Target>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ranks: Option<Vec<u32>>,
    },
    Correction {
        episode: EpisodeId,
        step: u32,
        actions: Vec<Action>,
    },
    Demonstration {
        actions: Vec<Action>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        optimality: Option<f64>,
    },
    Brush {
        target: Target,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cells: Option<Vec<Cell>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        polygon: Option<Vec<(f64, f64)>>,
        sign: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotation: Option<String>,
    },
}

impl EventPayload {
    pub fn feedback_kind(&self) -> FeedbackKind {
        match self {
            EventPayload::Rating { .. } => FeedbackKind::Evaluative,
            EventPayload::Ranking { .. } => FeedbackKind::Comparative,
            EventPayload::Correction { .. } => FeedbackKind::Corrective,
            EventPayload::Demonstration { .. } => FeedbackKind::Demonstrative,
            EventPayload::Brush { .. } => FeedbackKind::Descriptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeedbackEvent {
    pub session_id: String,
    #[serde(default)]
    pub user_id: String,
    pub ui_element: String,
    pub client_timestamp: i64,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
    /// Extra metadata copied into the record's `meta`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Hands out feedback ids and demonstration episode numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    pub next_feedback_id: u64,
    pub next_demo_num: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Translation {
    pub records: Vec<StandardizedFeedback>,
    /// Episodes created by the event (demonstrations) that must be ingested
    /// before the records are stored.
    pub new_episodes: Vec<EpisodeRecord>,
}

/// Translates one event. `ids` is only advanced when translation succeeds.
pub fn translate(
    ev: &RawFeedbackEvent,
    config: &ExperimentConfig,
    spec: &GridSpec,
    buffer: &dyn EpisodeSource,
    ids: &mut IdAllocator,
) -> Result<Translation, TranslateError> {
    let kind = ev.payload.feedback_kind();
    if !config.is_enabled(kind) {
        return Err(TranslateError::DisabledFeedbackType(kind));
    }
    let mut alloc = ids.clone();
    let meta = event_meta(ev)?;
    let mut new_episodes = Vec::new();

    let (targets, type_tag, content) = match &ev.payload {
        EventPayload::Rating { target, value, scale } => {
            let s = config.rating_scale;
            if let Some((lo, hi)) = scale {
                if *lo != s.min || *hi != s.max {
                    return Err(TranslateError::InvalidPayload(format!(
                        "scale [{lo}, {hi}] differs from configured [{}, {}]",
                        s.min, s.max
                    )));
                }
            }
            if !value.is_finite() || *value < s.min || *value > s.max {
                return Err(TranslateError::ScaleError {
                    value: *value,
                    min: s.min,
                    max: s.max,
                });
            }
            let tag = FeedbackTypeTag::new(Intention::Evaluate, Relation::Absolute, target.granularity());
            let content = FeedbackContent::Evaluation {
                score: s.to_score(*value).clamp(-1.0, 1.0),
                feature_mask: None,
            };
            (vec![target.clone()], tag, content)
        }
        EventPayload::Ranking { targets, ranks } => {
            if targets.is_empty() {
                return Err(TranslateError::EmptyRanking);
            }
            if targets.len() > config.comparison_slots.max(2) {
                return Err(TranslateError::InvalidPayload(format!(
                    "{} targets for {} comparison slots",
                    targets.len(),
                    config.comparison_slots
                )));
            }
            let rank_indices = match ranks {
                Some(r) => r.clone(),
                None => (1..=targets.len() as u32).collect(),
            };
            let granularity = targets[0].granularity();
            let tag = FeedbackTypeTag::new(Intention::Evaluate, Relation::Relative, granularity);
            (targets.clone(), tag, FeedbackContent::Ranking { rank_indices })
        }
        EventPayload::Correction { episode, step, actions } => {
            if actions.is_empty() {
                return Err(TranslateError::InvalidPayload("correction has no actions".into()));
            }
            let ep = fetch_known(buffer, episode)?;
            let step_ix = *step as usize;
            if step_ix >= ep.len() {
                return Err(TranslateError::InvalidPayload(format!(
                    "step {step} outside episode of length {}",
                    ep.len()
                )));
            }
            let (states, _, _) =
                replay(spec, ep.states[step_ix], actions).map_err(|e| TranslateError::ReplayError(e.to_string()))?;
            if states.len() != actions.len() + 1 {
                return Err(TranslateError::ReplayError(format!(
                    "episode terminates after {} of {} corrected actions",
                    states.len() - 1,
                    actions.len()
                )));
            }
            let tag = FeedbackTypeTag {
                actuality: if actions.len() > 1 {
                    Actuality::Generated
                } else {
                    Actuality::Observed
                },
                ..FeedbackTypeTag::new(Intention::Instruct, Relation::Absolute, Granularity::State)
            };
            let content = FeedbackContent::Instruction {
                actions: actions
                    .iter()
                    .enumerate()
                    .map(|(i, &action)| InstructedAction {
                        state_index: step + i as u32,
                        action,
                        optimality: None,
                    })
                    .collect(),
                goal: None,
                feature_mask: None,
            };
            (vec![Target::state(episode.clone(), *step)], tag, content)
        }
        EventPayload::Demonstration { actions, optimality } => {
            if actions.is_empty() {
                return Err(TranslateError::InvalidPayload("demonstration has no actions".into()));
            }
            let optimality = optimality.unwrap_or(config.demo_optimality);
            if !(0.0..=1.0).contains(&optimality) {
                return Err(TranslateError::InvalidPayload(format!("optimality {optimality} outside [0, 1]")));
            }
            let id = EpisodeId::new(&spec.name, DEMO_SOURCE_KIND, DEMO_POLICY_ID, DEMO_SKILL_LEVEL, alloc.next_demo_num);
            alloc.next_demo_num += 1;
            let record =
                episode_from_actions(spec, id.clone(), actions).map_err(|e| TranslateError::ReplayError(e.to_string()))?;
            if record.len() != actions.len() {
                return Err(TranslateError::ReplayError(format!(
                    "demonstration terminates after {} of {} actions",
                    record.len(),
                    actions.len()
                )));
            }
            let tag = FeedbackTypeTag {
                actuality: Actuality::Generated,
                ..FeedbackTypeTag::new(Intention::Instruct, Relation::Absolute, Granularity::Episode)
            };
            let content = FeedbackContent::Instruction {
                actions: actions
                    .iter()
                    .enumerate()
                    .map(|(i, &action)| InstructedAction {
                        state_index: i as u32,
                        action,
                        optimality: Some(optimality),
                    })
                    .collect(),
                goal: None,
                feature_mask: None,
            };
            new_episodes.push(record);
            (vec![Target::episode(id).with_origin(ORIGIN_GENERATED)], tag, content)
        }
        EventPayload::Brush {
            target,
            cells,
            polygon,
            sign,
            annotation,
        } => {
            if *sign != 1.0 && *sign != -1.0 {
                return Err(TranslateError::InvalidPayload(format!("brush sign {sign} is not ±1")));
            }
            let cells = match (cells, polygon) {
                (Some(c), None) => {
                    if let Some(bad) = c.iter().find(|c| !spec.in_bounds(**c)) {
                        return Err(TranslateError::InvalidPayload(format!("brushed cell {bad} outside grid")));
                    }
                    c.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>()
                }
                (None, Some(p)) => rasterize_polygon(p, spec.width, spec.height),
                _ => {
                    return Err(TranslateError::InvalidPayload(
                        "brush needs exactly one of cells or polygon".into(),
                    ))
                }
            };
            if cells.is_empty() {
                return Err(TranslateError::InvalidPayload("brush mask is empty".into()));
            }
            let tag = FeedbackTypeTag {
                content_level: ContentLevel::Feature,
                ..FeedbackTypeTag::new(Intention::Describe, Relation::Absolute, target.granularity())
            };
            let content = FeedbackContent::Description {
                feature_mask: Some(FeatureMask::cells(cells)),
                importance: *sign,
                annotation: annotation.clone(),
            };
            (vec![target.clone()], tag, content)
        }
    };

    let unknown: Vec<String> = targets
        .iter()
        .filter(|t| !t.is_generated())
        .filter_map(Target::episode_ref)
        .filter(|id| buffer.episode_len(id).is_none())
        .map(ToString::to_string)
        .collect();
    if !unknown.is_empty() {
        return Err(TranslateError::UnknownTargets(unknown));
    }

    let record = StandardizedFeedback {
        feedback_id: alloc.next_feedback_id,
        targets: targets.into_iter().map(|t| stamp(t, ev.client_timestamp)).collect(),
        type_tag,
        content,
        meta,
    };
    alloc.next_feedback_id += 1;
    let violations = validate_feedback(&record, buffer as &dyn EpisodeCatalog);
    if !violations.is_empty() {
        return Err(TranslateError::Invalid(violations));
    }
    *ids = alloc;
    Ok(Translation {
        records: vec![record],
        new_episodes,
    })
}

fn stamp(t: Target, ts: i64) -> Target {
    if t.timestamp == 0 {
        t.at(ts)
    } else {
        t
    }
}

fn fetch_known(buffer: &dyn EpisodeSource, id: &EpisodeId) -> Result<EpisodeRecord, TranslateError> {
    buffer.fetch(id).map_err(|e| match e {
        BufferError::NotFound(id) => TranslateError::UnknownTargets(vec![id.to_string()]),
        other => TranslateError::Buffer(other),
    })
}

fn event_meta(ev: &RawFeedbackEvent) -> Result<FeedbackMeta, TranslateError> {
    let meta = FeedbackMeta {
        timestamp: ev.client_timestamp,
        session_id: ev.session_id.clone(),
        user_id: ev.user_id.clone(),
        latency_ms: ev.latency_ms,
        ui_element: ev.ui_element.clone(),
        confidence: ev.confidence,
        free_text: ev.free_text.clone(),
        extra: ev.meta.clone(),
    };
    if let Some(c) = ev.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(TranslateError::InvalidPayload(format!("confidence {c} outside [0, 1]")));
        }
    }
    Ok(meta)
}

/// Cells whose centers lie inside `polygon` (even-odd rule), clipped to the grid.
pub fn rasterize_polygon(polygon: &[(f64, f64)], width: i32, height: i32) -> Vec<Cell> {
    if polygon.len() < 3 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let mut inside = false;
            let mut j = polygon.len() - 1;
            for i in 0..polygon.len() {
                let (xi, yi) = polygon[i];
                let (xj, yj) = polygon[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                out.push(Cell::new(x, y));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preference {
    pub winner: Target,
    pub loser: Target,
}

/// Pairwise preferences implied by a ranking: one per pair with strictly
/// better rank, ties skipped.
pub fn expand_ranking(fb: &StandardizedFeedback) -> Result<Vec<Preference>, TranslateError> {
    let FeedbackContent::Ranking { rank_indices } = &fb.content else {
        return Err(TranslateError::NotRelative);
    };
    if fb.type_tag.relation != Relation::Relative {
        return Err(TranslateError::NotRelative);
    }
    let mut out = Vec::new();
    for i in 0..fb.targets.len() {
        for j in i + 1..fb.targets.len() {
            let (ri, rj) = (rank_indices[i], rank_indices[j]);
            if ri < rj {
                out.push(Preference {
                    winner: fb.targets[i].clone(),
                    loser: fb.targets[j].clone(),
                });
            } else if rj < ri {
                out.push(Preference {
                    winner: fb.targets[j].clone(),
                    loser: fb.targets[i].clone(),
                });
            }
        }
    }
    Ok(out)
}

/// A correction turned into a preference between two concrete segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPreference {
    pub winner: SegmentView,
    pub loser: SegmentView,
}

/// Materializes a state-level correction as (corrected, original) segments by
/// replaying the corrected actions from the correction point. The original
/// segment covers the same steps, clipped to the episode. Returns `None` when
/// both segments are identical.
pub fn correction_to_preference(
    fb: &StandardizedFeedback,
    buffer: &dyn EpisodeSource,
    spec: &GridSpec,
) -> Result<Option<SegmentPreference>, TranslateError> {
    let (FeedbackContent::Instruction { actions, .. }, [target]) = (&fb.content, fb.targets.as_slice()) else {
        return Err(TranslateError::InvalidPayload("not a correction record".into()));
    };
    let TargetScope::State { reference, step } = &target.scope else {
        return Err(TranslateError::InvalidPayload("correction must target a state".into()));
    };
    if fb.type_tag.intention != Intention::Instruct || actions.is_empty() {
        return Err(TranslateError::InvalidPayload("not a correction record".into()));
    }
    let ep = fetch_known(buffer, reference)?;
    let start = *step as usize;
    if start >= ep.len() {
        return Err(TranslateError::ReplayError(format!("step {step} outside episode")));
    }
    let acts: Vec<Action> = actions.iter().map(|a| a.action).collect();
    let (states, rewards, _) =
        replay(spec, ep.states[start], &acts).map_err(|e| TranslateError::ReplayError(e.to_string()))?;
    let n = rewards.len();
    let winner = SegmentView {
        start,
        end: start + n,
        states,
        actions: acts[..n].to_vec(),
        gt_rewards: rewards,
    };
    let loser = SegmentView::of(&ep, start, (start + acts.len()).min(ep.len()))?;
    if winner.states == loser.states {
        return Ok(None);
    }
    Ok(Some(SegmentPreference { winner, loser }))
}

/// Entered (reward-bearing) cells of a segment view.
pub fn entered(view: &SegmentView) -> Vec<Cell> {
    view.states.iter().skip(1).map(|o: &Observation| o.cell).collect()
}
