use std::collections::{BTreeSet, HashMap};

use feedback_core::annotator::{AnnotatorProfile, SimulatedAnnotator};
use feedback_core::buffer::EpisodeStore;
use feedback_core::config::{ExperimentConfig, FeedbackKind, RatingScale};
use feedback_core::encoding::*;
use feedback_core::gridworld::{
    rollout_policy, rollout_policy_from, value_iteration, EpisodeRecord, GridSpec, PolicyKind,
};
use feedback_core::reward_model::EpisodeLoss;
use feedback_core::sampler::*;
use feedback_core::translator::{expand_ranking, translate, IdAllocator, RawFeedbackEvent};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::Check;

const C7_BETAS: [f64; 4] = [0.0, 1.0, 5.0, f64::INFINITY];
const C7_EPISODES: usize = 20;
const C7_RANKINGS: usize = 500;

/// Events of every kind from one annotator over a pool of rollouts.
fn simulated_events(
    spec: &GridSpec,
    values: &feedback_core::gridworld::ValueTable,
    eps: &[EpisodeRecord],
    beta: f64,
    seed: u64,
) -> Vec<RawFeedbackEvent> {
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("c7", beta, seed), "c7");
    let mut out = Vec::new();
    for (i, ep) in eps.iter().enumerate() {
        let target = Target::episode(ep.id.clone());
        out.push(a.annotate_evaluative(target.clone(), ep, spec, RatingScale::default()));
        // Rankings over two to four episodes.
        let k = 2 + i % 3;
        let options: Vec<(Target, f64)> = (0..k)
            .map(|j| &eps[(i + 5 * j) % eps.len()])
            .map(|e| (Target::episode(e.id.clone()), e.total_return))
            .collect();
        out.push(a.annotate_comparative(&options));
        if let Some(ev) = (0..ep.len()).find_map(|step| a.annotate_corrective(ep, step, values)) {
            out.push(ev);
        }
        out.push(a.annotate_demonstrative(spec, values));
        out.extend(a.annotate_descriptive(spec, Target::segment(ep.id.clone(), 0, ep.len() as u32)));
    }
    out
}

fn ranking_over(ranks: &[u32]) -> StandardizedFeedback {
    StandardizedFeedback {
        feedback_id: 0,
        targets: (0..ranks.len())
            .map(|i| Target::episode(EpisodeId::new("default-8x8", "c7", 0, 0, i as u64)))
            .collect(),
        type_tag: FeedbackTypeTag::new(Intention::Evaluate, Relation::Relative, Granularity::Episode),
        content: FeedbackContent::Ranking {
            rank_indices: ranks.to_vec(),
        },
        meta: FeedbackMeta::default(),
    }
}

/// Random permutations of `1..=k`; returns how many expanded to the wrong
/// number of pairs or put a worse rank ahead.
fn ranking_expansion_failures(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut bad = 0;
    for _ in 0..C7_RANKINGS {
        let k = rng.random_range(2..=8usize);
        let mut ranks: Vec<u32> = (1..=k as u32).collect();
        ranks.shuffle(rng);
        let fb = ranking_over(&ranks);
        let prefs = expand_ranking(&fb).map_err(|e| e.to_string())?;
        let rank_of = |t: &Target| fb.targets.iter().position(|x| x == t).map(|i| ranks[i]);
        let ordered = prefs.iter().all(|p| rank_of(&p.winner) < rank_of(&p.loser));
        if prefs.len() != k * (k - 1) / 2 || !ordered {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn compatibility() -> Result<Check, String> {
    let spec = GridSpec::default_8x8();
    let values = value_iteration(&spec, 1e-9);
    let eps = rollout_policy(&spec, &values, PolicyKind::Epsilon { epsilon: 0.5 }, C7_EPISODES, 7);
    let mut buffer: HashMap<EpisodeId, EpisodeRecord> = eps.iter().map(|e| (e.id.clone(), e.clone())).collect();
    // Rankings span up to four episodes.
    let config = ExperimentConfig {
        comparison_slots: 4,
        ..ExperimentConfig::default()
    };
    let mut ids = IdAllocator::default();
    let mut kinds = BTreeSet::new();
    let (mut n_events, mut n_records, mut failures) = (0, 0, Vec::new());
    let mut annotator_rankings_bad = 0;
    for (seed, beta) in C7_BETAS.into_iter().enumerate() {
        for ev in simulated_events(&spec, &values, &eps, beta, seed as u64) {
            n_events += 1;
            let kind = ev.payload.feedback_kind();
            let t = match translate(&ev, &config, &spec, &buffer, &mut ids) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(format!("β={beta} {}: {e}", kind.name()));
                    continue;
                }
            };
            kinds.insert(kind);
            buffer.extend(t.new_episodes.into_iter().map(|e| (e.id.clone(), e)));
            for fb in &t.records {
                n_records += 1;
                if let Some(v) = validate_feedback(fb, &buffer).first() {
                    failures.push(format!("β={beta} {}: {}", kind.name(), v.rule));
                }
                if let FeedbackContent::Ranking { rank_indices } = &fb.content {
                    let k = rank_indices.iter().collect::<BTreeSet<_>>().len();
                    if expand_ranking(fb).map(|p| p.len()).ok() != Some(k * (k - 1) / 2) {
                        annotator_rankings_bad += 1;
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let expansion_bad = ranking_expansion_failures(&mut rng)?;
    let all_kinds = kinds.len() == FeedbackKind::ALL.len();
    let mut check = Check::new(
        failures.is_empty() && all_kinds && expansion_bad == 0 && annotator_rankings_bad == 0,
        format!(
            "{n_events} events → {n_records} records, {} violations, {}/5 kinds; ranking expansion wrong on {} of {C7_RANKINGS} permutations and {annotator_rankings_bad} annotator rankings",
            failures.len(),
            kinds.len(),
            expansion_bad
        ),
    );
    for f in failures.into_iter().take(5) {
        check = check.note(f);
    }
    Ok(check)
}

/// Episodes at four skill levels plus a calibration pool, in a scratch store.
fn populated(n_main: usize, n_calib: usize) -> Result<(tempfile::TempDir, EpisodeStore), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = EpisodeStore::open(dir.path()).map_err(|e| e.to_string())?;
    let spec = GridSpec::default_8x8();
    let vt = value_iteration(&spec, 1e-9);
    let per = n_main.div_ceil(4);
    let mut first = 0;
    for (i, eps) in [0.9, 0.6, 0.3, 0.0].into_iter().enumerate() {
        let take = per.min(n_main - i * per);
        let batch = rollout_policy_from(&spec, &vt, PolicyKind::Epsilon { epsilon: eps }, take, i as u64, first);
        first += take as u64;
        store.ingest(&batch).map_err(|e| e.to_string())?;
    }
    let calib: Vec<EpisodeRecord> = rollout_policy(&spec, &vt, PolicyKind::Epsilon { epsilon: 0.2 }, n_calib, 99)
        .into_iter()
        .map(|mut e| {
            e.id.source_kind = "calibration".into();
            e
        })
        .collect();
    store.ingest(&calib).map_err(|e| e.to_string())?;
    Ok((dir, store))
}

struct TableScorer(HashMap<EpisodeId, f64>);

impl LossScorer for TableScorer {
    fn episode_loss(&self, id: &EpisodeId) -> EpisodeLoss {
        EpisodeLoss {
            value: self.0.get(id).copied().unwrap_or(0.0),
            cold_start: false,
            n_items: 1,
        }
    }
}

const CHI2_TRIALS: u64 = 4000;

/// χ² p-value of the first draw of independently seeded random samplers.
fn uniformity_p(store: &EpisodeStore) -> Result<f64, String> {
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let mut counts: HashMap<&EpisodeId, u64> = snap.ordering().iter().map(|id| (id, 0)).collect();
    for seed in 0..CHI2_TRIALS {
        let (b, _) = SamplerState::new(SamplerMode::Random { seed })
            .next_batch(1, &ctx)
            .map_err(|e| e.to_string())?;
        *counts.get_mut(&b.ids[0]).ok_or("served an unknown episode")? += 1;
    }
    let expected = CHI2_TRIALS as f64 / counts.len() as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| e.to_string())?;
    Ok(1.0 - dist.cdf(chi2))
}

/// Whether a full progressive pass is sorted by (skill level, return).
fn progressive_monotone(store: &EpisodeStore) -> Result<bool, String> {
    let snap = store.snapshot();
    let ctx = SampleContext::new(&snap);
    let mut st = SamplerState::new(SamplerMode::Progressive { window: None });
    let mut keys = Vec::new();
    let mut phases = Vec::new();
    while let Ok((b, next)) = st.next_batch(3, &ctx) {
        phases.push(b.phase);
        for id in &b.ids {
            let e = snap.get(id).ok_or("served an unknown episode")?;
            keys.push((e.skill_level, e.total_return));
        }
        st = next;
    }
    Ok(keys.len() == snap.len()
        && keys.windows(2).all(|w| w[0] <= w[1])
        && phases.windows(2).all(|w| w[0] <= w[1]))
}

/// Batches of the query-based sampler that differ from an exhaustive
/// search over the unserved main pool.
fn query_mismatches(store: &EpisodeStore) -> Result<usize, String> {
    let snap = store.snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scorer = TableScorer(snap.ordering().iter().map(|id| (id.clone(), rng.random::<f64>())).collect());
    let ctx = SampleContext {
        scorer: Some(&scorer),
        calibration_source: Some("calibration"),
        ..SampleContext::new(&snap)
    };
    let main: Vec<&EpisodeId> = snap.ordering().iter().filter(|id| id.source_kind != "calibration").collect();
    let mut st = SamplerState::new(SamplerMode::QueryBased { pool: 0, seed: 0 });
    let mut served: BTreeSet<EpisodeId> = BTreeSet::new();
    let mut bad = 0;
    for _ in 0..4 {
        let (b, next) = st.next_batch(5, &ctx).map_err(|e| e.to_string())?;
        let mut rest: Vec<&EpisodeId> = main.iter().copied().filter(|id| !served.contains(*id)).collect();
        rest.sort_by(|a, b| scorer.0[*b].total_cmp(&scorer.0[*a]));
        let want: BTreeSet<EpisodeId> = rest.iter().take(5).map(|&id| id.clone()).collect();
        let got: BTreeSet<EpisodeId> = b.ids.iter().cloned().collect();
        if got != want {
            bad += 1;
        }
        served.extend(b.ids);
        st = next;
    }
    Ok(bad)
}

/// Runs a scripted trigger stream; true when the active phase follows the
/// script and every transition fired exactly once.
fn state_machine_once() -> bool {
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
        (FeedbackReceived, 3),
    ];
    let mut st = SamplerState::new(SamplerMode::StateMachine { schedule });
    for (ev, want) in script {
        st = st.advance_trigger(ev);
        if st.machine.as_ref().map(|m| m.active) != Some(want) {
            return false;
        }
    }
    st.machine.is_some_and(|m| m.fired == [0, 1, 2])
}

pub fn sampler_contracts() -> Result<Check, String> {
    let (_uniform_dir, uniform_store) = populated(20, 0)?;
    let p = uniformity_p(&uniform_store)?;
    let (_ordered_dir, ordered_store) = populated(40, 0)?;
    let monotone = progressive_monotone(&ordered_store)?;
    let (_dir, store) = populated(30, 5)?;
    let mismatches = query_mismatches(&store)?;
    let once = state_machine_once();
    Ok(Check::new(
        p > 0.001 && monotone && mismatches == 0 && once,
        format!(
            "random χ² p={p:.3} (need > 0.001), progressive monotone {monotone}, query-based mismatched batches {mismatches}/4, state machine fires once {once}"
        ),
    ))
}
