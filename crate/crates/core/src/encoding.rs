//! The standard feedback encoding.
//!
//! A [`StandardizedFeedback`] record is a tuple of targets, a six-dimension
//! type tag, a content payload and metadata. Records travel as single-line
//! JSON objects:
//!
//! ```text
//! {"v":1,"feedback_id":7,"targets":[...],"type_tag":{...},"content":{...},"meta":{...}}
//! ```
//!
//! Field order is fixed by the struct layout and metadata extras are kept in a
//! sorted map, so serialization is deterministic. Reals are written in the
//! shortest form that parses back to the same `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, Cell};

pub const SCHEMA_VERSION: u32 = 1;

pub const ORIGIN_REPLAY: &str = "replay";
pub const ORIGIN_GENERATED: &str = "generated";

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("invariant `{rule}` violated: {message}")]
    InvariantViolation { rule: &'static str, message: String },
    #[error("parse error at column {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
}

/// Reference to one stored episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpisodeId {
    pub env_name: String,
    pub source_kind: String,
    pub policy_id: u64,
    pub skill_level: u64,
    pub episode_num: u64,
}

impl EpisodeId {
    pub fn new(env_name: &str, source_kind: &str, policy_id: u64, skill_level: u64, episode_num: u64) -> Self {
        EpisodeId {
            env_name: env_name.into(),
            source_kind: source_kind.into(),
            policy_id,
            skill_level,
            episode_num,
        }
    }
}

/// `env:source:policy:skill:num`, used as a compact key (e.g. in URLs).
impl fmt::Display for EpisodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}",
            self.env_name, self.source_kind, self.policy_id, self.skill_level, self.episode_num
        )
    }
}

impl FromStr for EpisodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.rsplitn(4, ':');
        let mut int = |what: &str| -> Result<u64, String> {
            parts
                .next()
                .ok_or_else(|| format!("missing {what}"))?
                .parse()
                .map_err(|_| format!("bad {what} in `{s}`"))
        };
        let episode_num = int("episode number")?;
        let skill_level = int("skill level")?;
        let policy_id = int("policy id")?;
        let rest = parts.next().ok_or("missing env/source")?;
        let (env, source) = rest.rsplit_once(':').ok_or("missing source kind")?;
        Ok(EpisodeId::new(env, source, policy_id, skill_level, episode_num))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetScope {
    Episode {
        #[serde(rename = "ref")]
        reference: EpisodeId,
    },
    State {
        #[serde(rename = "ref")]
        reference: EpisodeId,
        step: u32,
    },
    Segment {
        #[serde(rename = "ref")]
        reference: EpisodeId,
        start: u32,
        end: u32,
    },
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    #[serde(flatten)]
    pub scope: TargetScope,
    pub origin: String,
    pub timestamp: i64,
}

impl Target {
    pub fn episode(reference: EpisodeId) -> Self {
        Self::replay(TargetScope::Episode { reference })
    }

    pub fn state(reference: EpisodeId, step: u32) -> Self {
        Self::replay(TargetScope::State { reference, step })
    }

    pub fn segment(reference: EpisodeId, start: u32, end: u32) -> Self {
        Self::replay(TargetScope::Segment { reference, start, end })
    }

    pub fn all() -> Self {
        Self::replay(TargetScope::All)
    }

    fn replay(scope: TargetScope) -> Self {
        Target {
            scope,
            origin: ORIGIN_REPLAY.into(),
            timestamp: 0,
        }
    }

    pub fn with_origin(mut self, origin: &str) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn at(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn episode_ref(&self) -> Option<&EpisodeId> {
        match &self.scope {
            TargetScope::Episode { reference }
            | TargetScope::State { reference, .. }
            | TargetScope::Segment { reference, .. } => Some(reference),
            TargetScope::All => None,
        }
    }

    pub fn is_generated(&self) -> bool {
        self.origin == ORIGIN_GENERATED
    }

    pub fn granularity(&self) -> Granularity {
        match self.scope {
            TargetScope::Episode { .. } => Granularity::Episode,
            TargetScope::State { .. } => Granularity::State,
            TargetScope::Segment { .. } => Granularity::Segment,
            TargetScope::All => Granularity::Entire,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intention {
    Evaluate,
    Instruct,
    Describe,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expression {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actuality {
    Observed,
    #[serde(alias = "hypothetical")]
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentLevel {
    Instance,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    State,
    Segment,
    Episode,
    Entire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackTypeTag {
    pub intention: Intention,
    pub expression: Expression,
    pub actuality: Actuality,
    pub relation: Relation,
    pub content_level: ContentLevel,
    pub granularity: Granularity,
}

impl FeedbackTypeTag {
    /// Explicit, observed, instance-level tag; adjust the rest with struct update syntax.
    pub fn new(intention: Intention, relation: Relation, granularity: Granularity) -> Self {
        FeedbackTypeTag {
            intention,
            expression: Expression::Explicit,
            actuality: Actuality::Observed,
            relation,
            content_level: ContentLevel::Instance,
            granularity,
        }
    }
}

/// Sparse grid mask. `weights`, when present, gives a real-valued mask aligned with `cells`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl FeatureMask {
    pub fn cells(cells: Vec<Cell>) -> Self {
        FeatureMask { cells, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructedAction {
    pub state_index: u32,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackContent {
    Evaluation {
        score: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_mask: Option<FeatureMask>,
    },
    Ranking {
        rank_indices: Vec<u32>,
    },
    Instruction {
        actions: Vec<InstructedAction>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        goal: Option<Cell>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_mask: Option<FeatureMask>,
    },
    Description {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_mask: Option<FeatureMask>,
        importance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        annotation: Option<String>,
    },
    /// Payload of non-intentional feedback that carries no score.
    #[serde(rename = "none")]
    Unspecified {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_mask: Option<FeatureMask>,
    },
}

impl FeedbackContent {
    pub fn feature_mask(&self) -> Option<&FeatureMask> {
        match self {
            FeedbackContent::Evaluation { feature_mask, .. }
            | FeedbackContent::Instruction { feature_mask, .. }
            | FeedbackContent::Description { feature_mask, .. }
            | FeedbackContent::Unspecified { feature_mask } => feature_mask.as_ref(),
            FeedbackContent::Ranking { .. } => None,
        }
    }
}

const RESERVED_META_KEYS: [&str; 7] = [
    "timestamp",
    "session_id",
    "user_id",
    "latency_ms",
    "ui_element",
    "confidence",
    "free_text",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackMeta {
    pub timestamp: i64,
    pub session_id: String,
    pub user_id: String,
    pub latency_ms: u64,
    pub ui_element: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
    /// Unknown keys, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedFeedback {
    pub feedback_id: u64,
    pub targets: Vec<Target>,
    pub type_tag: FeedbackTypeTag,
    pub content: FeedbackContent,
    pub meta: FeedbackMeta,
}

impl StandardizedFeedback {
    /// Episodes this record refers to, in target order.
    pub fn episode_refs(&self) -> impl Iterator<Item = &EpisodeId> {
        self.targets.iter().filter_map(Target::episode_ref)
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    v: u32,
    feedback_id: u64,
    targets: &'a [Target],
    type_tag: &'a FeedbackTypeTag,
    content: &'a FeedbackContent,
    meta: &'a FeedbackMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    #[allow(dead_code)]
    v: u32,
    feedback_id: u64,
    targets: Vec<Target>,
    type_tag: FeedbackTypeTag,
    content: FeedbackContent,
    meta: FeedbackMeta,
}

#[derive(Deserialize)]
struct VersionProbe {
    v: u32,
}

/// A broken invariant. `rule` is a stable identifier, `message` is for humans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub message: String,
}

impl Violation {
    fn new(rule: &'static str, message: impl Into<String>) -> Self {
        Violation {
            rule,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Lookup of stored episode lengths (number of transitions).
pub trait EpisodeCatalog {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize>;
}

impl EpisodeCatalog for HashMap<EpisodeId, usize> {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize> {
        self.get(id).copied()
    }
}

impl EpisodeCatalog for BTreeMap<EpisodeId, usize> {
    fn episode_len(&self, id: &EpisodeId) -> Option<usize> {
        self.get(id).copied()
    }
}

fn in_unit_interval(x: f64, lo: f64) -> bool {
    x.is_finite() && (lo..=1.0).contains(&x)
}

/// Structural invariants that do not need the episode buffer.
pub fn check_invariants(fb: &StandardizedFeedback) -> Vec<Violation> {
    let mut out = Vec::new();
    let tag = &fb.type_tag;
    let n = fb.targets.len();

    if n == 0 {
        out.push(Violation::new("empty_targets", "feedback has no targets"));
    }
    if n > 1 && fb.targets.iter().any(|t| t.scope == TargetScope::All) {
        out.push(Violation::new("all_target_alone", "AllTarget must be the only target"));
    }
    for t in &fb.targets {
        if let TargetScope::Segment { start, end, .. } = t.scope {
            if start >= end {
                out.push(Violation::new(
                    "segment_bounds",
                    format!("segment start {start} not before end {end}"),
                ));
            }
        }
        if t.granularity() != tag.granularity {
            out.push(Violation::new(
                "granularity_mismatch",
                format!(
                    "target granularity {:?} does not match tag {:?}",
                    t.granularity(),
                    tag.granularity
                ),
            ));
        }
    }

    match tag.relation {
        Relation::Absolute => {
            if n != 1 {
                out.push(Violation::new(
                    "absolute_single_target",
                    format!("absolute feedback requires exactly 1 target, found {n}"),
                ));
            }
            if matches!(fb.content, FeedbackContent::Ranking { .. }) {
                out.push(Violation::new(
                    "ranking_requires_relative",
                    "ranking content requires relation=relative",
                ));
            }
        }
        Relation::Relative => {
            if n < 2 {
                out.push(Violation::new("relative_target_count", "relative requires ≥2 targets"));
            }
            match &fb.content {
                FeedbackContent::Ranking { rank_indices } => {
                    if rank_indices.len() != n {
                        out.push(Violation::new(
                            "ranking_alignment",
                            format!("{} rank indices for {n} targets", rank_indices.len()),
                        ));
                    }
                    let k = rank_indices.len() as u32;
                    if let Some(bad) = rank_indices.iter().find(|&&r| r == 0 || r > k) {
                        out.push(Violation::new(
                            "rank_range",
                            format!("rank index {bad} outside 1..={k}"),
                        ));
                    }
                }
                _ => out.push(Violation::new(
                    "relative_requires_ranking",
                    "relative feedback requires ranking content",
                )),
            }
        }
    }

    let payload_ok = match tag.intention {
        Intention::Evaluate => matches!(
            fb.content,
            FeedbackContent::Evaluation { .. } | FeedbackContent::Ranking { .. }
        ),
        Intention::Instruct => matches!(fb.content, FeedbackContent::Instruction { .. }),
        Intention::Describe => matches!(fb.content, FeedbackContent::Description { .. }),
        Intention::None => matches!(
            fb.content,
            FeedbackContent::Evaluation { .. } | FeedbackContent::Unspecified { .. }
        ),
    };
    if !payload_ok {
        let rule = match tag.intention {
            Intention::Evaluate => "evaluate_payload",
            Intention::Instruct => "instruct_payload",
            Intention::Describe => "describe_payload",
            Intention::None => "none_payload",
        };
        out.push(Violation::new(
            rule,
            format!("intention {:?} cannot carry this content", tag.intention),
        ));
    }
    if tag.content_level == ContentLevel::Feature && fb.content.feature_mask().is_none() {
        out.push(Violation::new(
            "feature_payload",
            "feature-level feedback requires a feature mask",
        ));
    }

    match &fb.content {
        FeedbackContent::Evaluation { score, .. } => {
            if !in_unit_interval(*score, -1.0) {
                out.push(Violation::new("score_range", format!("score {score} outside [-1,1]")));
            }
        }
        FeedbackContent::Instruction { actions, .. } => {
            for a in actions {
                if let Some(o) = a.optimality {
                    if !in_unit_interval(o, 0.0) {
                        out.push(Violation::new(
                            "optimality_range",
                            format!("optimality {o} outside [0,1]"),
                        ));
                    }
                }
            }
        }
        FeedbackContent::Description { importance, .. } => {
            if !in_unit_interval(*importance, -1.0) {
                out.push(Violation::new(
                    "importance_range",
                    format!("importance {importance} outside [-1,1]"),
                ));
            }
        }
        FeedbackContent::Ranking { .. } | FeedbackContent::Unspecified { .. } => {}
    }
    if let Some(mask) = fb.content.feature_mask() {
        if let Some(w) = &mask.weights {
            if w.len() != mask.cells.len() || w.iter().any(|x| !x.is_finite()) {
                out.push(Violation::new(
                    "mask_weights",
                    "mask weights must be finite and aligned with cells",
                ));
            }
        }
    }

    if let Some(c) = fb.meta.confidence {
        if !in_unit_interval(c, 0.0) {
            out.push(Violation::new("confidence_range", format!("confidence {c} outside [0,1]")));
        }
    }
    if let Some(k) = fb.meta.extra.keys().find(|k| RESERVED_META_KEYS.contains(&k.as_str())) {
        out.push(Violation::new(
            "reserved_meta_key",
            format!("extra metadata key `{k}` shadows a standard field"),
        ));
    }
    out
}

/// All invariants plus buffer membership of non-generated targets.
pub fn validate_feedback(fb: &StandardizedFeedback, catalog: &dyn EpisodeCatalog) -> Vec<Violation> {
    let mut out = check_invariants(fb);
    for t in fb.targets.iter().filter(|t| !t.is_generated()) {
        let Some(reference) = t.episode_ref() else {
            continue;
        };
        let Some(len) = catalog.episode_len(reference) else {
            out.push(Violation::new("unknown_episode", format!("episode {reference} not in buffer")));
            continue;
        };
        match t.scope {
            TargetScope::State { step, .. } if step as usize >= len => {
                out.push(Violation::new(
                    "step_out_of_range",
                    format!("step out of range: {step} ≥ episode length {len}"),
                ));
            }
            TargetScope::Segment { end, .. } if end as usize > len => {
                out.push(Violation::new(
                    "segment_out_of_range",
                    format!("segment out of range: end {end} > episode length {len}"),
                ));
            }
            _ => {}
        }
    }
    out
}

/// Serializes one record as a single line (without the trailing newline).
pub fn serialize_feedback(fb: &StandardizedFeedback) -> Result<String, EncodingError> {
    if let Some(v) = check_invariants(fb).into_iter().next() {
        return Err(EncodingError::InvariantViolation {
            rule: v.rule,
            message: v.message,
        });
    }
    let wire = WireOut {
        v: SCHEMA_VERSION,
        feedback_id: fb.feedback_id,
        targets: &fb.targets,
        type_tag: &fb.type_tag,
        content: &fb.content,
        meta: &fb.meta,
    };
    serde_json::to_string(&wire).map_err(|e| EncodingError::InvariantViolation {
        rule: "serializable",
        message: e.to_string(),
    })
}

fn parse_error(e: serde_json::Error) -> EncodingError {
    EncodingError::Parse {
        position: e.column(),
        reason: e.to_string(),
    }
}

/// Parses one record. Accepts an optional trailing newline.
pub fn parse_feedback(raw: &str) -> Result<StandardizedFeedback, EncodingError> {
    let raw = raw.strip_suffix('\n').unwrap_or(raw);
    let probe: VersionProbe = serde_json::from_str(raw).map_err(parse_error)?;
    if probe.v != SCHEMA_VERSION {
        return Err(EncodingError::SchemaVersion(probe.v));
    }
    let wire: WireIn = serde_json::from_str(raw).map_err(parse_error)?;
    Ok(StandardizedFeedback {
        feedback_id: wire.feedback_id,
        targets: wire.targets,
        type_tag: wire.type_tag,
        content: wire.content,
        meta: wire.meta,
    })
}

/// Parses a newline-delimited stream, reporting the 1-based line of the first failure.
pub fn parse_feedback_lines(text: &str) -> Result<Vec<StandardizedFeedback>, (usize, EncodingError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_feedback(l).map_err(|e| (i + 1, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(n: u64) -> EpisodeId {
        EpisodeId::new("default-8x8", "policy-rollout", 0, 1000, n)
    }

    fn rating(score: f64) -> StandardizedFeedback {
        StandardizedFeedback {
            feedback_id: 1,
            targets: vec![Target::episode(ep(0))],
            type_tag: FeedbackTypeTag::new(Intention::Evaluate, Relation::Absolute, Granularity::Episode),
            content: FeedbackContent::Evaluation {
                score,
                feature_mask: None,
            },
            meta: FeedbackMeta::default(),
        }
    }

    fn ranking(k: usize, ranks: Vec<u32>) -> StandardizedFeedback {
        StandardizedFeedback {
            feedback_id: 2,
            targets: (0..k as u64).map(|i| Target::episode(ep(i))).collect(),
            type_tag: FeedbackTypeTag::new(Intention::Evaluate, Relation::Relative, Granularity::Episode),
            content: FeedbackContent::Ranking { rank_indices: ranks },
            meta: FeedbackMeta::default(),
        }
    }

    #[test]
    fn minimal_absolute_record() {
        let line = serialize_feedback(&rating(1.0)).unwrap();
        assert!(!line.contains('\n'));
        assert!(line.starts_with(r#"{"v":1,"feedback_id":1,"#));
        assert!(line.contains(r#""intention":"evaluate""#));
        assert!(line.contains(r#""relation":"absolute""#));
        assert!(line.contains(r#""score":1.0"#));
    }

    #[test]
    fn minimal_pairwise_record() {
        let fb = ranking(2, vec![1, 2]);
        let line = serialize_feedback(&fb).unwrap();
        assert!(line.contains(r#""relation":"relative""#));
        assert_eq!(parse_feedback(&line).unwrap().targets.len(), 2);
    }

    #[test]
    fn hypothetical_parses_as_generated() {
        let line = serialize_feedback(&rating(0.5)).unwrap();
        let old = line.replace(r#""actuality":"observed""#, r#""actuality":"hypothetical""#);
        assert_ne!(old, line);
        let fb = parse_feedback(&old).unwrap();
        assert_eq!(fb.type_tag.actuality, Actuality::Generated);
        // and it is written back with the canonical spelling
        assert!(serialize_feedback(&fb).unwrap().contains(r#""actuality":"generated""#));
    }

    #[test]
    fn truncated_record_is_a_parse_error() {
        let line = serialize_feedback(&rating(0.5)).unwrap();
        let err = parse_feedback(&line[..line.len() / 2]).unwrap_err();
        assert!(matches!(err, EncodingError::Parse { .. }));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let line = serialize_feedback(&rating(0.5)).unwrap().replacen(r#""v":1"#, r#""v":2"#, 1);
        assert_eq!(parse_feedback(&line).unwrap_err(), EncodingError::SchemaVersion(2));
    }

    #[test]
    fn unknown_meta_keys_survive() {
        let mut fb = rating(0.0);
        fb.meta.extra.insert("likert_raw".into(), serde_json::json!(3));
        fb.meta.extra.insert("note".into(), serde_json::json!({"a": [1, "x"]}));
        let line = serialize_feedback(&fb).unwrap();
        let back = parse_feedback(&line).unwrap();
        assert_eq!(back, fb);
        assert_eq!(serialize_feedback(&back).unwrap(), line);
    }

    #[test]
    fn reserved_meta_key_is_rejected() {
        let mut fb = rating(0.0);
        fb.meta.extra.insert("user_id".into(), serde_json::json!("x"));
        assert!(matches!(
            serialize_feedback(&fb),
            Err(EncodingError::InvariantViolation { rule: "reserved_meta_key", .. })
        ));
    }

    #[test]
    fn validate_reports_relative_with_one_target() {
        let fb = ranking(1, vec![1]);
        let catalog: HashMap<EpisodeId, usize> = [(ep(0), 5)].into();
        let v = validate_feedback(&fb, &catalog);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "relative requires ≥2 targets");
    }

    #[test]
    fn validate_valid_record_is_clean() {
        let catalog: HashMap<EpisodeId, usize> = [(ep(0), 5)].into();
        assert!(validate_feedback(&rating(-1.0), &catalog).is_empty());
    }

    #[test]
    fn validate_checks_step_against_stored_length() {
        let mut fb = rating(0.2);
        fb.type_tag.granularity = Granularity::State;
        let catalog: HashMap<EpisodeId, usize> = [(ep(0), 5)].into();
        fb.targets = vec![Target::state(ep(0), 4)];
        assert!(validate_feedback(&fb, &catalog).is_empty());
        fb.targets = vec![Target::state(ep(0), 5)];
        let v = validate_feedback(&fb, &catalog);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.starts_with("step out of range"));
    }

    #[test]
    fn validate_unknown_episode_skipped_for_generated() {
        let catalog: HashMap<EpisodeId, usize> = HashMap::new();
        let mut fb = rating(0.2);
        assert_eq!(validate_feedback(&fb, &catalog)[0].rule, "unknown_episode");
        fb.targets[0].origin = ORIGIN_GENERATED.into();
        assert!(validate_feedback(&fb, &catalog).is_empty());
    }

    #[test]
    fn ranks_must_lie_in_range_but_may_tie() {
        assert!(check_invariants(&ranking(3, vec![1, 1, 2])).is_empty());
        assert_eq!(check_invariants(&ranking(3, vec![1, 2, 4]))[0].rule, "rank_range");
        assert_eq!(check_invariants(&ranking(3, vec![1, 2]))[0].rule, "ranking_alignment");
    }

    #[test]
    fn score_outside_unit_interval_is_rejected() {
        assert_eq!(check_invariants(&rating(1.5))[0].rule, "score_range");
        assert_eq!(check_invariants(&rating(f64::NAN))[0].rule, "score_range");
    }

    #[test]
    fn episode_id_key_round_trips() {
        let id = EpisodeId::new("my:env", "human-demo", 3, 0, 17);
        let key = id.to_string();
        assert_eq!(key.parse::<EpisodeId>().unwrap(), id);
        assert!("a:b:1:2".parse::<EpisodeId>().is_err());
    }
}
