mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use feedback_core::encoding::{parse_feedback, Target};
use feedback_service::wire::CreateSession;
use feedback_service::FeedbackService;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SESSIONS: usize = 8;
const PER_SESSION: usize = 1250;
const CHUNK: usize = 50;

fn ids_of(log: &[u8]) -> Vec<(u64, String)> {
    std::str::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| {
            let r = parse_feedback(l).unwrap();
            (r.feedback_id, r.meta.session_id)
        })
        .collect()
}

#[test]
fn concurrent_sessions_keep_the_log_whole() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(FeedbackService::open(dir.path()).unwrap());
    svc.create_experiment(config("c")).unwrap();
    let episodes: Vec<_> = svc
        .list_episodes("c")
        .unwrap()
        .into_iter()
        .map(|e| e.episode_id)
        .collect();
    let episodes = Arc::new(episodes);

    let handles: Vec<_> = (0..SESSIONS)
        .map(|u| {
            let svc = svc.clone();
            let episodes = episodes.clone();
            std::thread::spawn(move || {
                let s = svc
                    .create_session("c", CreateSession { user_id: Some(format!("user{u}")) })
                    .unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(u as u64);
                let mut accepted = Vec::new();
                for _ in 0..PER_SESSION / CHUNK {
                    let events = (0..CHUNK)
                        .map(|_| {
                            let id = episodes[rng.random_range(0..episodes.len())].clone();
                            if rng.random_bool(0.5) {
                                rating(Target::episode(id), rng.random_range(1.0..=5.0))
                            } else {
                                let other = episodes[rng.random_range(0..episodes.len())].clone();
                                ranking(vec![Target::episode(id), Target::episode(other)])
                            }
                        })
                        .collect();
                    let resp = svc.submit_feedback(&s.session_id, ok(events)).unwrap();
                    assert_eq!(resp.rejected(), 0);
                    accepted.extend(resp.accepted_ids());
                    if rng.random_bool(0.1) {
                        svc.next_samples(&s.session_id, 2).unwrap();
                    }
                }
                (s.session_id, accepted)
            })
        })
        .collect();
    let per_session: BTreeMap<String, Vec<u64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    let log = svc.export_log("c").unwrap();
    let lines = ids_of(&log);
    let total = SESSIONS * PER_SESSION;
    assert_eq!(lines.len(), total);
    // Log order equals id order, with no gaps or duplicates.
    assert!(lines.iter().enumerate().all(|(i, (id, _))| *id == i as u64));
    for (sid, ids) in &per_session {
        assert_eq!(ids.len(), PER_SESSION);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(ids.iter().all(|&id| &lines[id as usize].1 == sid));
        assert_eq!(svc.session_info(sid).unwrap().feedback_count, PER_SESSION as u64);
    }
    let m = svc.metrics("c").unwrap();
    assert_eq!(m.log_records, total as u64);
    assert_eq!(m.log_bytes, log.len() as u64);
    drop(svc);

    // A crash mid-append leaves a torn final line; reopening drops it.
    let path = dir.path().join("experiments/c/feedback.log");
    std::fs::write(&path, &log[..log.len() - 11]).unwrap();
    let svc = FeedbackService::open(dir.path()).unwrap();
    let recovered = svc.export_log("c").unwrap();
    assert_eq!(ids_of(&recovered).len(), total - 1);
    assert!(log.starts_with(&recovered));
    let (sid, _) = per_session.iter().next().unwrap();
    let resp = svc
        .submit_feedback(sid, ok(vec![rating(Target::episode(episodes[0].clone()), 3.0)]))
        .unwrap();
    assert_eq!(resp.accepted_ids(), vec![total as u64 - 1]);
    let after = svc.export_log("c").unwrap();
    let ids: Vec<u64> = ids_of(&after).into_iter().map(|(id, _)| id).collect();
    assert_eq!(ids, (0..total as u64).collect::<Vec<_>>());
}
