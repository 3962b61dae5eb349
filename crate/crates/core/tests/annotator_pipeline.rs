use std::collections::{BTreeSet, HashMap};

use feedback_core::annotator::*;
use feedback_core::config::{ExperimentConfig, FeedbackKind, RatingScale};
use feedback_core::encoding::*;
use feedback_core::gridworld::*;
use feedback_core::translator::*;
use proptest::prelude::*;

struct World {
    spec: GridSpec,
    vt: ValueTable,
    buffer: HashMap<EpisodeId, EpisodeRecord>,
    eps: Vec<EpisodeRecord>,
}

fn world() -> World {
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    let eps = rollout_policy(&spec, &vt, PolicyKind::Epsilon { epsilon: 0.5 }, 30, 2);
    let buffer = eps.iter().map(|e| (e.id.clone(), e.clone())).collect();
    World { spec, vt, buffer, eps }
}

/// A few events of every kind from annotators spanning the β range.
fn events(w: &World, beta: f64, seed: u64) -> Vec<RawFeedbackEvent> {
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("u1", beta, seed), "s1");
    let mut out = Vec::new();
    for (i, ep) in w.eps.iter().enumerate().take(6) {
        let target = Target::episode(ep.id.clone());
        out.push(a.annotate_evaluative(target.clone(), ep, &w.spec, RatingScale::default()));
        let other = &w.eps[(i + 7) % w.eps.len()];
        out.push(a.annotate_comparative(&[
            (target.clone(), ep.total_return),
            (Target::episode(other.id.clone()), other.total_return),
        ]));
        for step in 0..ep.len() {
            if let Some(ev) = a.annotate_corrective(ep, step, &w.vt) {
                out.push(ev);
                break;
            }
        }
        out.push(a.annotate_demonstrative(&w.spec, &w.vt));
        out.extend(a.annotate_descriptive(&w.spec, Target::segment(ep.id.clone(), 0, ep.len() as u32)));
    }
    out
}

#[test]
fn every_simulated_event_translates_and_validates() {
    let mut w = world();
    let config = ExperimentConfig::default();
    let mut ids = IdAllocator::default();
    let mut kinds = BTreeSet::new();
    let mut n_records = 0;
    for (beta, seed) in [(0.0, 1), (1.0, 2), (5.0, 3), (f64::INFINITY, 4)] {
        for ev in events(&w, beta, seed) {
            // Events survive the wire format.
            let wire = serde_json::to_string(&ev).unwrap();
            let ev: RawFeedbackEvent = serde_json::from_str(&wire).unwrap();
            let t = translate(&ev, &config, &w.spec, &w.buffer, &mut ids)
                .unwrap_or_else(|e| panic!("{:?} failed: {e}", ev.payload.feedback_kind()));
            for ep in t.new_episodes {
                w.buffer.insert(ep.id.clone(), ep);
            }
            for fb in &t.records {
                let v = validate_feedback(fb, &w.buffer);
                assert!(v.is_empty(), "{v:?}");
                parse_feedback(&serialize_feedback(fb).unwrap()).unwrap();
                n_records += 1;
            }
            kinds.insert(ev.payload.feedback_kind());
        }
    }
    assert_eq!(kinds, FeedbackKind::ALL.into_iter().collect());
    assert_eq!(ids.next_feedback_id, n_records);
}

#[test]
fn disabled_kind_is_refused_without_consuming_ids() {
    let w = world();
    let mut config = ExperimentConfig::default();
    config.enabled_feedback_types.remove(&FeedbackKind::Evaluative);
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("u", 1.0, 0), "s");
    let ev = a.annotate_evaluative(Target::episode(w.eps[0].id.clone()), &w.eps[0], &w.spec, RatingScale::default());
    let mut ids = IdAllocator::default();
    assert!(matches!(
        translate(&ev, &config, &w.spec, &w.buffer, &mut ids),
        Err(TranslateError::DisabledFeedbackType(FeedbackKind::Evaluative))
    ));
    assert_eq!(ids, IdAllocator::default());
}

fn ranking(ranks: &[u32]) -> StandardizedFeedback {
    StandardizedFeedback {
        feedback_id: 0,
        targets: (0..ranks.len())
            .map(|i| Target::episode(EpisodeId::new("e", "s", 0, 0, i as u64)))
            .collect(),
        type_tag: FeedbackTypeTag::new(Intention::Evaluate, Relation::Relative, Granularity::Episode),
        content: FeedbackContent::Ranking {
            rank_indices: ranks.to_vec(),
        },
        meta: FeedbackMeta::default(),
    }
}

proptest! {
    #[test]
    fn distinct_ranks_expand_to_all_pairs(ranks in Just((1u32..=8).collect::<Vec<_>>()).prop_shuffle(), k in 2usize..=8) {
        let ranks: Vec<u32> = ranks.into_iter().filter(|r| *r as usize <= k).collect();
        let fb = ranking(&ranks);
        let prefs = expand_ranking(&fb).unwrap();
        prop_assert_eq!(prefs.len(), k * (k - 1) / 2);
        let rank_of = |t: &Target| ranks[fb.targets.iter().position(|x| x == t).unwrap()];
        for p in &prefs {
            prop_assert!(rank_of(&p.winner) < rank_of(&p.loser));
        }
    }
}

#[test]
fn ties_are_skipped() {
    assert_eq!(expand_ranking(&ranking(&[1, 1, 2])).unwrap().len(), 2);
}

#[test]
fn comparative_choices_follow_the_choice_model() {
    // Two options 1 apart at β = ln 3: the better one wins 3 times in 4.
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("u", 3f64.ln(), 9), "s");
    let n = 20_000;
    let wins = (0..n).filter(|_| a.pairwise_choice(1.0, 0.0, "t").chosen == 0).count();
    let frac = wins as f64 / n as f64;
    assert!((frac - 0.75).abs() < 0.015, "{frac}");
}

#[test]
fn rational_annotator_demonstrates_optimally() {
    let w = world();
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("u", f64::INFINITY, 0), "s");
    let acts = a.demonstration_actions(&w.spec, &w.vt);
    let id = EpisodeId::new("default-8x8", DEMO_SOURCE_KIND, DEMO_POLICY_ID, DEMO_SKILL_LEVEL, 0);
    let ep = episode_from_actions(&w.spec, id, &acts).unwrap();
    assert_eq!(ep.terminated, Termination::Goal);
    assert!((ep.total_return - 0.90).abs() < 1e-12);
}

#[test]
fn evaluative_noise_shrinks_with_beta() {
    let spread = |beta: f64| {
        let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("u", beta, 5), "s");
        let xs: Vec<f64> = (0..4000).map(|_| a.evaluative_score(0.0).1).collect();
        feedback_core::stats::std_dev(&xs)
    };
    for beta in [0.0, 1.0, 9.0] {
        let want = 1.0 / (1.0 + beta);
        assert!((spread(beta) - want).abs() < 0.05 * want, "β={beta}");
    }
}
