use std::collections::{BTreeMap, HashMap};

use feedback_core::buffer::{BufferIndex, EpisodeStore};
use feedback_core::encoding::EpisodeId;
use feedback_core::gridworld::*;
use feedback_core::rationality::{calibration_schedule, CadencePhase, CalibrationSettings, PhaseKind};
use feedback_core::reward_model::EpisodeLoss;
use feedback_core::sampler::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Episodes at several skill levels plus an optional calibration pool.
fn populated(n_main: usize, n_calib: usize) -> (tempfile::TempDir, EpisodeStore) {
    let dir = tempfile::tempdir().unwrap();
    let store = EpisodeStore::open(dir.path()).unwrap();
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    let per = n_main.div_ceil(4);
    let mut first = 0;
    for (i, eps) in [0.9, 0.6, 0.3, 0.0].into_iter().enumerate() {
        let take = per.min(n_main - i * per);
        let batch = rollout_policy_from(&spec, &vt, PolicyKind::Epsilon { epsilon: eps }, take, i as u64, first);
        first += take as u64;
        store.ingest(&batch).unwrap();
    }
    if n_calib > 0 {
        let calib: Vec<EpisodeRecord> = rollout_policy(&spec, &vt, PolicyKind::Epsilon { epsilon: 0.2 }, n_calib, 99)
            .into_iter()
            .map(|mut e| {
                e.id.source_kind = "calibration".into();
                e
            })
            .collect();
        store.ingest(&calib).unwrap();
    }
    assert_eq!(store.len(), n_main + n_calib);
    (dir, store)
}

#[test]
fn random_mode_is_uniform() {
    let (_d, store) = populated(20, 0);
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let pool = snap.ordering();
    let mut counts: HashMap<&EpisodeId, u64> = pool.iter().map(|id| (id, 0)).collect();
    // The first draw of independently seeded samplers.
    let trials = 4000;
    for seed in 0..trials {
        let (b, _) = SamplerState::new(SamplerMode::Random { seed }).next_batch(1, &ctx).unwrap();
        *counts.get_mut(&b.ids[0]).unwrap() += 1;
    }
    let expected = trials as f64 / pool.len() as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((pool.len() - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "χ² = {chi2}, p = {p}");
}

#[test]
fn random_mode_serves_whole_pool_each_pass() {
    let (_d, store) = populated(20, 0);
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let mut st = SamplerState::new(SamplerMode::Random { seed: 3 });
    for _ in 0..3 {
        let mut pass = Vec::new();
        for _ in 0..5 {
            let (b, next) = st.next_batch(4, &ctx).unwrap();
            pass.extend(b.ids);
            st = next;
        }
        pass.sort();
        pass.dedup();
        assert_eq!(pass.len(), 20);
    }
}

#[test]
fn progressive_order_is_monotone() {
    let (_d, store) = populated(40, 0);
    let snap = store.snapshot();
    assert!(snap.is_sorted());
    let ctx = SampleContext::new(&snap);
    let mut st = SamplerState::new(SamplerMode::Progressive { window: None });
    let mut served = Vec::new();
    let mut phases = Vec::new();
    while let Ok((b, next)) = st.next_batch(3, &ctx) {
        phases.push(b.phase);
        served.extend(b.ids);
        st = next;
    }
    assert_eq!(served.len(), 40);
    let keys: Vec<(u64, f64)> = served
        .iter()
        .map(|id| {
            let e = snap.get(id).unwrap();
            (e.skill_level, e.total_return)
        })
        .collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]), "{keys:?}");
    assert!(phases.windows(2).all(|w| w[0] <= w[1]));
}

struct TableScorer(HashMap<EpisodeId, f64>);

impl LossScorer for TableScorer {
    fn episode_loss(&self, id: &EpisodeId) -> EpisodeLoss {
        EpisodeLoss {
            value: self.0[id],
            cold_start: false,
            n_items: 1,
        }
    }
}

#[test]
fn query_based_returns_argmax_loss_set() {
    let (_d, store) = populated(30, 5);
    let snap = store.snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scorer = TableScorer(snap.ordering().iter().map(|id| (id.clone(), rng.random::<f64>())).collect());
    let ctx = SampleContext {
        scorer: Some(&scorer),
        calibration_source: Some("calibration"),
        ..SampleContext::new(&snap)
    };
    let main: Vec<&EpisodeId> = snap.ordering().iter().filter(|id| id.source_kind != "calibration").collect();
    let mut st = SamplerState::new(SamplerMode::QueryBased { pool: 0, seed: 0 });
    let mut served: Vec<EpisodeId> = Vec::new();
    for _ in 0..4 {
        let (b, next) = st.next_batch(5, &ctx).unwrap();
        // Exhaustive search over the not-yet-served main pool.
        let mut rest: Vec<&EpisodeId> = main.iter().copied().filter(|id| !served.contains(id)).collect();
        rest.sort_by(|a, b| scorer.0[*b].total_cmp(&scorer.0[*a]));
        let mut want: Vec<EpisodeId> = rest[..5].iter().map(|&id| id.clone()).collect();
        let mut got = b.ids.clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
        served.extend(b.ids);
        st = next;
    }
}

#[test]
fn query_based_cold_start_falls_back_to_random() {
    struct Cold;
    impl LossScorer for Cold {
        fn episode_loss(&self, _: &EpisodeId) -> EpisodeLoss {
            EpisodeLoss {
                value: 0.0,
                cold_start: true,
                n_items: 0,
            }
        }
    }
    let (_d, store) = populated(12, 0);
    let snap = store.snapshot();
    let ctx = SampleContext {
        scorer: Some(&Cold),
        ..SampleContext::new(&snap)
    };
    let (b, _) = SamplerState::new(SamplerMode::QueryBased { pool: 0, seed: 4 }).next_batch(3, &ctx).unwrap();
    assert_eq!(b.ids.len(), 3);
}

#[test]
fn state_machine_fires_each_trigger_once() {
    let schedule = Schedule {
        initial: Box::new(SamplerMode::Progressive { window: None }),
        transitions: vec![
            Transition {
                trigger: Trigger::AfterFeedback { count: 3 },
                mode: SamplerMode::Random { seed: 1 },
            },
            Transition {
                trigger: Trigger::AfterMillis { ms: 1000 },
                mode: SamplerMode::Manual,
            },
            Transition {
                trigger: Trigger::AfterFeedback { count: 2 },
                mode: SamplerMode::Random { seed: 2 },
            },
        ],
    };
    let mut st = SamplerState::new(SamplerMode::StateMachine { schedule });
    use TriggerEvent::*;
    let script = [
        (FeedbackReceived, 0),
        (Tick(5000), 0),
        (FeedbackReceived, 0),
        (FeedbackReceived, 1),
        (Tick(400), 1),
        (FeedbackReceived, 1),
        (Tick(600), 2),
        (FeedbackReceived, 2),
        (Tick(10_000), 2),
        (FeedbackReceived, 3),
        (FeedbackReceived, 3),
        (Tick(10_000), 3),
    ];
    for (i, (ev, want)) in script.into_iter().enumerate() {
        st = st.advance_trigger(ev);
        assert_eq!(st.machine.as_ref().unwrap().active, want, "after event {i}");
    }
    assert_eq!(st.machine.unwrap().fired, vec![0, 1, 2]);
}

#[test]
fn state_machine_batches_report_phase_and_mode() {
    let (_d, store) = populated(12, 0);
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let schedule = Schedule {
        initial: Box::new(SamplerMode::Progressive { window: Some(4) }),
        transitions: vec![Transition {
            trigger: Trigger::AfterFeedback { count: 1 },
            mode: SamplerMode::Random { seed: 0 },
        }],
    };
    let st = SamplerState::new(SamplerMode::StateMachine { schedule });
    let (b, st) = st.next_batch(2, &ctx).unwrap();
    assert_eq!((b.mode.as_str(), b.phase), ("progressive", 0));
    let st = st.advance_trigger(TriggerEvent::FeedbackReceived);
    let (b, _) = st.next_batch(2, &ctx).unwrap();
    assert_eq!((b.mode.as_str(), b.phase), ("random", 1));
}

fn settings(rho: f64, cadence: Vec<CadencePhase>) -> CalibrationSettings {
    CalibrationSettings {
        source_kind: "calibration".into(),
        rho,
        cadence,
        seed: 7,
    }
}

#[test]
fn calibration_schedule_shapes() {
    let main = SamplerMode::Random { seed: 0 };
    let two = settings(
        0.1,
        vec![
            CadencePhase {
                kind: PhaseKind::Calibration,
                items: Some(20),
            },
            CadencePhase {
                kind: PhaseKind::Main,
                items: None,
            },
        ],
    );
    let s = calibration_schedule(&two, &main).unwrap();
    assert_eq!(s.transitions.len(), 1);
    assert_eq!(s.transitions[0].trigger, Trigger::AfterFeedback { count: 20 });
    assert!(matches!(*s.initial, SamplerMode::Calibration { .. }));

    let pure = settings(
        0.0,
        vec![CadencePhase {
            kind: PhaseKind::Main,
            items: None,
        }],
    );
    let s = calibration_schedule(&pure, &main).unwrap();
    assert!(s.transitions.is_empty());
    assert_eq!(*s.initial, main);

    let open_middle = settings(
        0.1,
        vec![
            CadencePhase {
                kind: PhaseKind::Calibration,
                items: None,
            },
            CadencePhase {
                kind: PhaseKind::Main,
                items: None,
            },
        ],
    );
    assert!(calibration_schedule(&open_middle, &main).is_err());
    assert!(calibration_schedule(&settings(1.5, two.cadence.clone()), &main).is_err());
}

#[test]
fn interleaving_serves_calibration_at_rate_rho() {
    let (_d, store) = populated(40, 10);
    let snap = store.snapshot();
    let ctx = SampleContext {
        calibration_source: Some("calibration"),
        ..SampleContext::new(&snap)
    };
    let mut st = SamplerState::new(SamplerMode::Interleaved {
        rho: 0.1,
        seed: 5,
        main: Box::new(SamplerMode::Random { seed: 6 }),
    });
    let mut by_source: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..1000 {
        let (b, next) = st.next_batch(1, &ctx).unwrap();
        let calib = b.ids[0].source_kind == "calibration";
        assert_eq!(calib, b.source == BatchSource::Calibration);
        *by_source.entry(if calib { "calibration" } else { "main" }).or_default() += 1;
        st = next;
    }
    let frac = by_source["calibration"] as f64 / 1000.0;
    assert!((frac - 0.1).abs() <= 0.02, "calibration fraction {frac}");

    let mut st = SamplerState::new(SamplerMode::Interleaved {
        rho: 0.0,
        seed: 5,
        main: Box::new(SamplerMode::Random { seed: 6 }),
    });
    for _ in 0..200 {
        let (b, next) = st.next_batch(1, &ctx).unwrap();
        assert_eq!(b.source, BatchSource::Main);
        st = next;
    }
}

#[test]
fn sampling_is_a_pure_function_of_state() {
    let (_d, store) = populated(20, 0);
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let st = SamplerState::new(SamplerMode::Random { seed: 11 });
    let (a, sa) = st.next_batch(3, &ctx).unwrap();
    let (b, sb) = st.next_batch(3, &ctx).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let state_json = serde_json::to_string(&sa).unwrap();
    let back: SamplerState = serde_json::from_str(&state_json).unwrap();
    assert_eq!(back.next_batch(3, &ctx).unwrap(), sa.next_batch(3, &ctx).unwrap());
}

#[test]
fn empty_buffer_is_an_error() {
    let snap = BufferIndex::default();
    let ctx = SampleContext::new(&snap);
    let st = SamplerState::new(SamplerMode::Random { seed: 0 });
    assert_eq!(st.next_batch(1, &ctx).unwrap_err(), SamplerError::EmptyBuffer);
}
