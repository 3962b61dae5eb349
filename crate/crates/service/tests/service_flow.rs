mod common;

use common::*;
use feedback_core::annotator::{AnnotatorProfile, SimulatedAnnotator};
use feedback_core::config::FeedbackKind;
use feedback_core::encoding::{parse_feedback, EpisodeId, Target};
use feedback_core::gridworld::{value_iteration, GridSpec};
use feedback_core::reward_model::LossWeights;
use feedback_core::translator::EventPayload;
use feedback_service::wire::{CreateSession, EpisodeSummary, EventResult, TrainRequest};
use feedback_service::{FeedbackService, ServiceError};

fn summaries(svc: &FeedbackService, exp: &str) -> Vec<EpisodeSummary> {
    svc.list_episodes(exp).unwrap()
}

/// `n` ranking events over episode pairs, chosen by a simulated annotator.
fn comparisons(
    svc: &FeedbackService,
    exp: &str,
    beta: f64,
    n: usize,
    seed: u64,
) -> Vec<feedback_core::translator::RawFeedbackEvent> {
    let eps = summaries(svc, exp);
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("sim", beta, seed), "ignored");
    (0..n)
        .map(|i| {
            let x = &eps[(i * 7) % eps.len()];
            let y = &eps[(i * 13 + 5) % eps.len()];
            a.annotate_comparative(&[
                (Target::episode(x.episode_id.clone()), x.total_return),
                (Target::episode(y.episode_id.clone()), y.total_return),
            ])
        })
        .collect()
}

#[test]
fn minimal_comparative_experiment_is_created() {
    let (_d, svc) = open();
    let created = svc.create_experiment(comparative_only("cmp")).unwrap();
    assert_eq!(created.experiment_id, "cmp");
    assert_eq!(created.buffer_episodes, 8 * 7);
    let view = svc.get_experiment("cmp").unwrap();
    assert_eq!(view.env, GridSpec::default_8x8());
    assert_eq!(svc.experiment_ids(), vec!["cmp".to_string()]);
}

#[test]
fn duplicate_experiment_conflicts() {
    let (_d, svc) = open();
    svc.create_experiment(config("dup")).unwrap();
    let err = svc.create_experiment(config("dup")).unwrap_err();
    assert!(matches!(err, ServiceError::Conflict(_)), "{err}");
}

#[test]
fn single_comparison_slot_is_rejected() {
    let (_d, svc) = open();
    let mut c = config("slots");
    c.comparison_slots = 1;
    match svc.create_experiment(c).unwrap_err() {
        ServiceError::Validation { field, .. } => assert_eq!(field, "comparison_slots"),
        other => panic!("{other}"),
    }
    assert!(svc.get_experiment("slots").is_err());
}

#[test]
fn missing_buffer_path_is_rejected() {
    let (d, svc) = open();
    let mut c = config("buf");
    c.buffer_path = Some(d.path().join("nope"));
    assert!(matches!(
        svc.create_experiment(c).unwrap_err(),
        ServiceError::Validation { .. }
    ));
}

#[test]
fn batch_payloads_match_the_buffer() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    let s = svc.create_session("e", CreateSession::default()).unwrap();
    assert_eq!(s.sampler_mode, "random");
    let batch = svc.next_samples(&s.session_id, 2).unwrap();
    assert_eq!(batch.episodes.len(), 2);
    let lens: std::collections::HashMap<EpisodeId, usize> = summaries(&svc, "e")
        .into_iter()
        .map(|e| (e.episode_id, e.episode_len))
        .collect();
    for ep in &batch.episodes {
        assert_eq!(ep.n_steps, lens[&ep.episode_id]);
        assert_eq!(ep.actions.len(), ep.n_steps);
        assert_eq!(ep.rewards.len(), ep.n_steps);
        assert_eq!(ep.states.len(), ep.n_steps + 1);
        let full = svc.episode_render("e", &ep.episode_id.to_string()).unwrap();
        assert_eq!(&full, ep);
    }
    assert!(matches!(
        svc.next_samples("nope", 2).unwrap_err(),
        ServiceError::SessionNotFound(_)
    ));
}

#[test]
fn invalid_event_is_rejected_in_place() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    let s = svc
        .create_session(
            "e",
            CreateSession {
                user_id: Some("u".into()),
            },
        )
        .unwrap();
    let eps = summaries(&svc, "e");
    let mut events: Vec<_> = (0..10)
        .map(|i| rating(Target::episode(eps[i].episode_id.clone()), 3.0))
        .collect();
    events[4] = rating(Target::episode(eps[4].episode_id.clone()), 9.0);
    let resp = svc.submit_feedback(&s.session_id, ok(events)).unwrap();
    assert_eq!(resp.accepted_ids(), vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
    assert_eq!(resp.rejected(), 1);
    match &resp.results[4] {
        EventResult::Rejected { index, error } => {
            assert_eq!(*index, 4);
            assert_eq!(error.error, "scale_error");
        }
        other => panic!("{other:?}"),
    }
    let log = svc.export_log("e").unwrap();
    let records: Vec<_> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| parse_feedback(l).unwrap())
        .collect();
    assert_eq!(records.len(), 9);
    assert!(records
        .iter()
        .all(|r| r.meta.user_id == "u" && r.meta.session_id == s.session_id));
    assert_eq!(svc.session_info(&s.session_id).unwrap().feedback_count, 9);
    let labeled: u64 = summaries(&svc, "e").iter().map(|e| e.labeled_count).sum();
    assert_eq!(labeled, 9);
}

#[test]
fn unparseable_event_is_rejected_in_place() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    let s = svc.create_session("e", CreateSession::default()).unwrap();
    let id = summaries(&svc, "e")[0].episode_id.clone();
    let resp = svc
        .submit_feedback(
            &s.session_id,
            vec![
                Err("expected value".into()),
                Ok(rating(Target::episode(id), 2.0)),
            ],
        )
        .unwrap();
    assert_eq!(resp.rejected(), 1);
    assert_eq!(resp.accepted_ids(), vec![0]);
}

#[test]
fn disabled_type_leaves_the_log_unchanged() {
    let (_d, svc) = open();
    svc.create_experiment(comparative_only("c")).unwrap();
    let s = svc.create_session("c", CreateSession::default()).unwrap();
    let eps = summaries(&svc, "c");
    let pair = ranking(vec![
        Target::episode(eps[0].episode_id.clone()),
        Target::episode(eps[1].episode_id.clone()),
    ]);
    svc.submit_feedback(&s.session_id, ok(vec![pair.clone()]))
        .unwrap();
    let before = svc.export_log("c").unwrap();
    let err = svc
        .submit_feedback(
            &s.session_id,
            ok(vec![
                pair,
                rating(Target::episode(eps[2].episode_id.clone()), 3.0),
            ]),
        )
        .unwrap_err();
    assert!(matches!(
        err,
        ServiceError::DisabledFeedbackType(FeedbackKind::Evaluative)
    ));
    assert_eq!(svc.export_log("c").unwrap(), before);
}

#[test]
fn demonstration_adds_an_episode() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    let s = svc.create_session("e", CreateSession::default()).unwrap();
    let before = svc.metrics("e").unwrap().buffer_episodes;
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    let mut cell = spec.start;
    let mut actions = Vec::new();
    while !spec.is_terminal(cell) {
        let a = vt.greedy(cell);
        actions.push(a);
        cell = spec.move_target(cell, a);
    }
    let resp = svc
        .submit_feedback(
            &s.session_id,
            ok(vec![event(EventPayload::Demonstration {
                actions,
                optimality: None,
            })]),
        )
        .unwrap();
    assert_eq!(resp.accepted_ids().len(), 1, "{resp:?}");
    let after = svc.metrics("e").unwrap();
    assert_eq!(after.buffer_episodes, before + 1);
    let demo = summaries(&svc, "e")
        .into_iter()
        .find(|e| e.episode_id.source_kind == "human-demo")
        .unwrap();
    assert_eq!(demo.labeled_count, 1);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (d, svc) = open();
        svc.create_experiment(config("t")).unwrap();
        let s = svc
            .create_session(
                "t",
                CreateSession {
                    user_id: Some("u".into()),
                },
            )
            .unwrap();
        let events = comparisons(&svc, "t", 2.0, 80, 9);
        svc.submit_feedback(&s.session_id, ok(events)).unwrap();
        let r = svc.run_training("t", TrainRequest::default()).unwrap();
        let ckpt = svc.snapshot_checkpoint("t", &r.snapshot_id).unwrap();
        drop(d);
        (r, ckpt)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(a.snapshot_id, "0001");
    assert_eq!(a.metrics.log_records, 80);
}

#[test]
fn comparative_only_training_reports_only_comparative_loss() {
    let (_d, svc) = open();
    let mut c = config("w");
    c.reward_model.weights = LossWeights::only(0.0, 1.0, 0.0, 0.0);
    svc.create_experiment(c).unwrap();
    let s = svc.create_session("w", CreateSession::default()).unwrap();
    let eps = summaries(&svc, "w");
    let mut events = comparisons(&svc, "w", 2.0, 40, 3);
    events.push(rating(Target::episode(eps[0].episode_id.clone()), 4.0));
    svc.submit_feedback(&s.session_id, ok(events)).unwrap();
    let r = svc.run_training("w", TrainRequest::default()).unwrap();
    let last = &r.metrics.final_loss;
    assert!(last.evaluative.is_none());
    assert!(last.comparative.is_some());
    assert_eq!(r.metrics.items.evaluative, 1);
}

#[test]
fn training_needs_feedback() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    assert!(matches!(
        svc.run_training("e", TrainRequest::default()).unwrap_err(),
        ServiceError::EmptyDataset
    ));
}

#[test]
fn snapshots_feed_the_sampler_and_episode_list() {
    let (_d, svc) = open();
    let mut c = config("q");
    c.sampler = feedback_core::sampler::SamplerMode::QueryBased { pool: 0, seed: 1 };
    svc.create_experiment(c).unwrap();
    let s = svc.create_session("q", CreateSession::default()).unwrap();
    svc.submit_feedback(&s.session_id, ok(comparisons(&svc, "q", 1.0, 60, 4)))
        .unwrap();
    let r = svc
        .run_training(
            "q",
            TrainRequest {
                seed: Some(3),
                mint_episodes: 5,
            },
        )
        .unwrap();
    assert_eq!(r.metrics.seed, 3);
    assert_eq!(r.metrics.minted_episodes, 5);
    let list = summaries(&svc, "q");
    assert_eq!(
        list.iter()
            .filter(|e| e.episode_id.source_kind == "online")
            .count(),
        5
    );
    let with_loss: Vec<_> = list.iter().filter(|e| e.loss.is_some()).collect();
    assert!(!with_loss.is_empty());
    let flagged = list.iter().filter(|e| e.high_impact).count();
    assert!(
        flagged >= 1 && flagged <= with_loss.len().div_ceil(10) + 2,
        "{flagged}"
    );
    let batch = svc.next_samples(&s.session_id, 3).unwrap();
    assert_eq!(batch.mode, "query_based");
    assert_eq!(batch.episodes.len(), 3);
    assert_eq!(svc.metrics("q").unwrap().latest_snapshot, Some(r));
}

#[test]
fn quality_needs_calibration_or_repeats() {
    let (_d, svc) = open();
    svc.create_experiment(config("e")).unwrap();
    let s = svc.create_session("e", CreateSession::default()).unwrap();
    assert!(matches!(
        svc.quality_estimate(&s.session_id).unwrap_err(),
        ServiceError::InsufficientData
    ));
}

#[test]
fn rational_annotator_is_consistent_on_repeats() {
    let (_d, svc) = open();
    svc.create_experiment(comparative_only("r")).unwrap();
    let s = svc
        .create_session(
            "r",
            CreateSession {
                user_id: Some("sharp".into()),
            },
        )
        .unwrap();
    let mut eps = summaries(&svc, "r");
    eps.sort_by(|a, b| a.total_return.total_cmp(&b.total_return));
    let (lo, hi) = (&eps[0], &eps[eps.len() - 1]);
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("sharp", 50.0, 11), "x");
    let events = (0..30)
        .map(|_| {
            a.annotate_comparative(&[
                (Target::episode(lo.episode_id.clone()), lo.total_return),
                (Target::episode(hi.episode_id.clone()), hi.total_return),
            ])
        })
        .collect();
    svc.submit_feedback(&s.session_id, ok(events)).unwrap();
    let q = svc.quality_estimate(&s.session_id).unwrap();
    assert_eq!(q.repeat_groups, 1);
    assert!(q.consistency.unwrap() >= 0.95, "{q:?}");
    let m = svc.metrics("r").unwrap();
    assert_eq!(m.consistency.len(), 1);
    assert_eq!(m.consistency[0].user_id, "sharp");
}

#[test]
fn export_is_byte_stable() {
    let (_d, svc) = open();
    svc.create_experiment(config("x")).unwrap();
    let s = svc.create_session("x", CreateSession::default()).unwrap();
    svc.submit_feedback(&s.session_id, ok(comparisons(&svc, "x", 1.0, 25, 1)))
        .unwrap();
    let a = svc.export_log("x").unwrap();
    let b = svc.export_log("x").unwrap();
    assert_eq!(a, b);
    assert!(a.ends_with(b"\n"));
    let ids: Vec<u64> = std::str::from_utf8(&a)
        .unwrap()
        .lines()
        .map(|l| parse_feedback(l).unwrap().feedback_id)
        .collect();
    assert_eq!(ids, (0..ids.len() as u64).collect::<Vec<_>>());
}

#[test]
fn restart_restores_everything() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, log, snap) = {
        let svc = FeedbackService::open(dir.path()).unwrap();
        svc.create_experiment(config("p")).unwrap();
        let s = svc
            .create_session(
                "p",
                CreateSession {
                    user_id: Some("u".into()),
                },
            )
            .unwrap();
        svc.submit_feedback(&s.session_id, ok(comparisons(&svc, "p", 1.0, 30, 2)))
            .unwrap();
        let r = svc.run_training("p", TrainRequest::default()).unwrap();
        (s.session_id, svc.export_log("p").unwrap(), r)
    };
    let svc = FeedbackService::open(dir.path()).unwrap();
    assert_eq!(svc.export_log("p").unwrap(), log);
    let info = svc.session_info(&sid).unwrap();
    assert_eq!(info.feedback_count, 30);
    assert_eq!(info.user_id, "u");
    assert_eq!(svc.metrics("p").unwrap().latest_snapshot, Some(snap));
    // Ids continue after the restored log.
    let resp = svc
        .submit_feedback(&sid, ok(comparisons(&svc, "p", 1.0, 2, 5)))
        .unwrap();
    assert_eq!(resp.accepted_ids(), vec![30, 31]);
    let again = svc.run_training("p", TrainRequest::default()).unwrap();
    assert_eq!(again.snapshot_id, "0002");
    assert!(matches!(
        svc.create_experiment(config("p")).unwrap_err(),
        ServiceError::Conflict(_)
    ));
}
