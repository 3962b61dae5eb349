//! Random valid feedback records and a tally of the grammar alternatives
//! they exercise.

use std::collections::{BTreeMap, BTreeSet};

use feedback_core::encoding::*;
use feedback_core::gridworld::{Action, Cell};
use rand::seq::IndexedRandom;
use rand::Rng;

const TEXT_CHARS: &[char] = &[
    'a', 'z', 'Q', '0', ' ', '"', '\\', '\n', '\t', '/', 'é', 'ß', '→', '中', '😀', '\u{7f}', '\u{1}',
];

fn text<R: Rng>(rng: &mut R, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| *TEXT_CHARS.choose(rng).expect("non-empty")).collect()
}

fn episode_id<R: Rng>(rng: &mut R) -> EpisodeId {
    let env = ["default-8x8", "maze-5x5", "env:with:colons"].choose(rng).expect("non-empty");
    let src = ["policy-rollout", "human-demo", "calibration"].choose(rng).expect("non-empty");
    EpisodeId::new(
        env,
        src,
        rng.random_range(0..5),
        rng.random_range(0..=1000),
        rng.random_range(0..100_000),
    )
}

fn target<R: Rng>(rng: &mut R, g: Granularity) -> Target {
    let ts = rng.random_range(-1_000_000i64..2_000_000_000_000);
    let origin = if rng.random() { ORIGIN_REPLAY } else { ORIGIN_GENERATED };
    match g {
        Granularity::Episode => Target::episode(episode_id(rng)).with_origin(origin).at(ts),
        Granularity::State => Target::state(episode_id(rng), rng.random_range(0..300))
            .with_origin(origin)
            .at(ts),
        Granularity::Segment => {
            let s = rng.random_range(0..300);
            Target::segment(episode_id(rng), s, s + rng.random_range(1..50))
                .with_origin(origin)
                .at(ts)
        }
        Granularity::Entire => Target::all().at(ts),
    }
}

fn mask<R: Rng>(rng: &mut R) -> FeatureMask {
    let n = rng.random_range(0..10);
    let cells: Vec<Cell> = (0..n)
        .map(|_| Cell::new(rng.random_range(0..8), rng.random_range(0..8)))
        .collect();
    let weights = rng
        .random_bool(0.5)
        .then(|| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect());
    FeatureMask { cells, weights }
}

/// A mask when the record is feature-level, maybe one otherwise.
fn mask_for<R: Rng>(rng: &mut R, feature: bool) -> Option<FeatureMask> {
    (feature || rng.random_bool(0.5)).then(|| mask(rng))
}

fn meta<R: Rng>(rng: &mut R) -> FeedbackMeta {
    let mut extra = BTreeMap::new();
    for _ in 0..rng.random_range(0..3) {
        let key = format!("x_{}", rng.random_range(0..1000));
        let value = match rng.random_range(0..4) {
            0 => serde_json::Value::from(rng.random::<i64>()),
            1 => serde_json::Value::from(text(rng, 8)),
            2 => serde_json::Value::from(rng.random_range(-1e6..1e6)),
            _ => serde_json::Value::from(rng.random::<bool>()),
        };
        extra.insert(key, value);
    }
    FeedbackMeta {
        timestamp: rng.random(),
        session_id: format!("s{}", rng.random_range(0..10_000)),
        user_id: format!("u{}", rng.random_range(0..100)),
        latency_ms: rng.random::<u32>() as u64,
        ui_element: ["rating-slider", "ranking-board", "brush-tool", ""]
            .choose(rng)
            .expect("non-empty")
            .to_string(),
        confidence: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
        free_text: rng.random_bool(0.5).then(|| text(rng, 20)),
        extra,
    }
}

fn tag<R: Rng>(rng: &mut R, intention: Intention, relation: Relation, level: ContentLevel, g: Granularity) -> FeedbackTypeTag {
    FeedbackTypeTag {
        intention,
        expression: if rng.random() { Expression::Explicit } else { Expression::Implicit },
        actuality: if rng.random() { Actuality::Observed } else { Actuality::Generated },
        relation,
        content_level: level,
        granularity: g,
    }
}

fn content<R: Rng>(rng: &mut R, intention: Intention, feature: bool) -> FeedbackContent {
    let evaluation = |rng: &mut R| FeedbackContent::Evaluation {
        score: rng.random_range(-1.0..=1.0),
        feature_mask: mask_for(rng, feature),
    };
    match intention {
        Intention::Evaluate => evaluation(rng),
        Intention::Instruct => FeedbackContent::Instruction {
            actions: (0..rng.random_range(0..6))
                .map(|_| InstructedAction {
                    state_index: rng.random_range(0..300),
                    action: *Action::ALL.choose(rng).expect("non-empty"),
                    optimality: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
                })
                .collect(),
            goal: rng
                .random_bool(0.5)
                .then(|| Cell::new(rng.random_range(0..8), rng.random_range(0..8))),
            feature_mask: mask_for(rng, feature),
        },
        Intention::Describe => FeedbackContent::Description {
            feature_mask: mask_for(rng, feature),
            importance: rng.random_range(-1.0..=1.0),
            annotation: rng.random_bool(0.5).then(|| text(rng, 16)),
        },
        Intention::None if rng.random() => evaluation(rng),
        Intention::None => FeedbackContent::Unspecified {
            feature_mask: mask_for(rng, feature),
        },
    }
}

/// One random record satisfying every encoding invariant. A quarter are
/// relative rankings over 2 to 6 targets.
pub fn random_feedback<R: Rng>(rng: &mut R) -> StandardizedFeedback {
    let feedback_id = rng.random();
    if rng.random_bool(0.25) {
        let g = *[Granularity::State, Granularity::Segment, Granularity::Episode]
            .choose(rng)
            .expect("non-empty");
        let k = rng.random_range(2..7usize);
        return StandardizedFeedback {
            feedback_id,
            targets: (0..k).map(|_| target(rng, g)).collect(),
            type_tag: tag(rng, Intention::Evaluate, Relation::Relative, ContentLevel::Instance, g),
            content: FeedbackContent::Ranking {
                rank_indices: (0..k).map(|_| rng.random_range(1..=k as u32)).collect(),
            },
            meta: meta(rng),
        };
    }
    let intention = *[Intention::Evaluate, Intention::Instruct, Intention::Describe, Intention::None]
        .choose(rng)
        .expect("non-empty");
    let feature: bool = rng.random();
    let level = if feature { ContentLevel::Feature } else { ContentLevel::Instance };
    let g = *[
        Granularity::State,
        Granularity::Segment,
        Granularity::Episode,
        Granularity::Entire,
    ]
    .choose(rng)
    .expect("non-empty");
    StandardizedFeedback {
        feedback_id,
        targets: vec![target(rng, g)],
        type_tag: tag(rng, intention, Relation::Absolute, level, g),
        content: content(rng, intention, feature),
        meta: meta(rng),
    }
}

/// Grammar alternatives a record exercises, as `rule:alternative` labels.
pub fn productions(fb: &StandardizedFeedback) -> Vec<String> {
    let t = &fb.type_tag;
    let mut out = vec![
        format!("intention:{:?}", t.intention),
        format!("expression:{:?}", t.expression),
        format!("actuality:{:?}", t.actuality),
        format!("relation:{:?}", t.relation),
        format!("content_level:{:?}", t.content_level),
        format!("granularity:{:?}", t.granularity),
    ];
    for target in &fb.targets {
        out.push(format!("target:{:?}", target.granularity()));
        if target.episode_ref().is_some() {
            out.push(format!("origin:{}", target.origin));
        }
    }
    let kind = match &fb.content {
        FeedbackContent::Evaluation { .. } => "evaluation",
        FeedbackContent::Ranking { .. } => "ranking",
        FeedbackContent::Instruction { .. } => "instruction",
        FeedbackContent::Description { .. } => "description",
        FeedbackContent::Unspecified { .. } => "none",
    };
    out.push(format!("content:{kind}"));
    if let Some(m) = fb.content.feature_mask() {
        out.push(format!("mask_weights:{}", m.weights.is_some()));
    }
    if let FeedbackContent::Instruction { actions, goal, .. } = &fb.content {
        out.push(format!("goal:{}", goal.is_some()));
        for a in actions {
            out.push(format!("action:{}", a.action.name()));
            out.push(format!("optimality:{}", a.optimality.is_some()));
        }
    }
    out.push(format!("confidence:{}", fb.meta.confidence.is_some()));
    out.push(format!("free_text:{}", fb.meta.free_text.is_some()));
    out.push(format!("extra:{}", !fb.meta.extra.is_empty()));
    out
}

/// Every alternative of every rule.
pub fn all_productions() -> BTreeSet<String> {
    let mut want = BTreeSet::new();
    let mut add = |rule: &str, alts: &[&str]| {
        for a in alts {
            want.insert(format!("{rule}:{a}"));
        }
    };
    add("intention", &["Evaluate", "Instruct", "Describe", "None"]);
    add("expression", &["Explicit", "Implicit"]);
    add("actuality", &["Observed", "Generated"]);
    add("relation", &["Absolute", "Relative"]);
    add("content_level", &["Instance", "Feature"]);
    add("granularity", &["State", "Segment", "Episode", "Entire"]);
    add("target", &["State", "Segment", "Episode", "Entire"]);
    add("origin", &[ORIGIN_REPLAY, ORIGIN_GENERATED]);
    add("content", &["evaluation", "ranking", "instruction", "description", "none"]);
    add("mask_weights", &["true", "false"]);
    add("goal", &["true", "false"]);
    add("action", &["up", "down", "left", "right"]);
    add("optimality", &["true", "false"]);
    add("confidence", &["true", "false"]);
    add("free_text", &["true", "false"]);
    add("extra", &["true", "false"]);
    want
}
