use std::fs;

use feedback_core::buffer::{read_episodes, BufferError, EpisodeStore};
use feedback_core::gridworld::*;

fn episodes(n: usize, seed: u64) -> Vec<EpisodeRecord> {
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    rollout_policy(&spec, &vt, PolicyKind::Epsilon { epsilon: 0.4 }, n, seed)
}

#[test]
fn contents_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(25, 1);
    {
        let store = EpisodeStore::open(dir.path()).unwrap();
        assert_eq!(store.ingest(&eps).unwrap(), 25);
        store.mark_labeled(&eps[3].id).unwrap();
        assert_eq!(store.mark_labeled(&eps[3].id).unwrap(), 2);
    }
    let store = EpisodeStore::open(dir.path()).unwrap();
    assert_eq!(store.len(), 25);
    for ep in &eps {
        assert_eq!(&store.fetch(&ep.id).unwrap(), ep);
    }
    assert_eq!(store.snapshot().get(&eps[3].id).unwrap().labeled_count, 2);
    assert_eq!(store.scan().unwrap(), eps);
}

#[test]
fn index_is_rebuilt_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(10, 2);
    let before = {
        let store = EpisodeStore::open(dir.path()).unwrap();
        store.ingest(&eps).unwrap();
        store.mark_labeled(&eps[0].id).unwrap();
        store.snapshot()
    };
    fs::remove_file(dir.path().join("episodes.idx")).unwrap();
    let store = EpisodeStore::open(dir.path()).unwrap();
    let after = store.snapshot();
    assert_eq!(after.ordering(), before.ordering());
    for (id, e) in before.iter() {
        assert_eq!(after.get(id), Some(e));
    }
}

#[test]
fn log_bytes_are_append_only() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("episodes.log");
    let store = EpisodeStore::open(dir.path()).unwrap();
    let eps = episodes(30, 3);
    let mut prev = Vec::new();
    for (i, chunk) in eps.chunks(7).enumerate() {
        store.ingest(chunk).unwrap();
        store.mark_labeled(&chunk[0].id).unwrap();
        store.set_flagged(&chunk[0].id, i % 2 == 0).unwrap();
        // Re-ingesting is a no-op.
        assert_eq!(store.ingest(chunk).unwrap(), 0);
        let now = fs::read(&log).unwrap();
        assert!(now.len() > prev.len());
        assert_eq!(&now[..prev.len()], &prev[..]);
        prev = now;
    }
}

#[test]
fn ordering_follows_skill_then_return() {
    let dir = tempfile::tempdir().unwrap();
    let store = EpisodeStore::open(dir.path()).unwrap();
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    for (i, kind) in [
        PolicyKind::Optimal,
        PolicyKind::Epsilon { epsilon: 0.8 },
        PolicyKind::Boltzmann { beta: 3.0 },
    ]
    .into_iter()
    .enumerate()
    {
        store.ingest(&rollout_policy(&spec, &vt, kind, 8, i as u64)).unwrap();
    }
    let snap = store.snapshot();
    assert!(snap.is_sorted());
    assert_eq!(snap.ordering().len(), 24);
}

#[test]
fn missing_and_out_of_range_requests() {
    let dir = tempfile::tempdir().unwrap();
    let store = EpisodeStore::open(dir.path()).unwrap();
    let eps = episodes(2, 4);
    assert!(matches!(store.fetch(&eps[0].id), Err(BufferError::NotFound(_))));
    store.ingest(&eps).unwrap();
    let n = eps[0].len();
    assert_eq!(store.slice(&eps[0].id, 0, n).unwrap().actions, eps[0].actions);
    assert!(matches!(store.slice(&eps[0].id, 0, n + 1), Err(BufferError::Range { .. })));
}

#[test]
fn read_only_load_works_beside_the_writer() {
    let dir = tempfile::tempdir().unwrap();
    let eps = episodes(12, 4);
    let store = EpisodeStore::open(dir.path()).unwrap();
    store.ingest(&eps).unwrap();
    store.mark_labeled(&eps[1].id).unwrap();
    assert!(matches!(EpisodeStore::open(dir.path()), Err(BufferError::Locked(_))));
    let loaded = read_episodes(dir.path()).unwrap();
    assert_eq!(loaded.len(), 12);
    assert!(eps.iter().all(|e| loaded.get(&e.id) == Some(e)));
    // A torn tail ends the read without an error.
    let log = dir.path().join("episodes.log");
    let mut bytes = fs::read(&log).unwrap();
    bytes.extend_from_slice(b"0000abcd\t{\"episode\":");
    fs::write(&log, &bytes).unwrap();
    assert_eq!(read_episodes(dir.path()).unwrap().len(), 12);
}
