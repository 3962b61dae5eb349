use std::collections::{BTreeMap, BTreeSet, HashMap};

use feedback_core::analysis::{beta_report, consistency_table};
use feedback_core::annotator::{AnnotatorProfile, SimulatedAnnotator};
use feedback_core::config::{ExperimentConfig, FeedbackKind};
use feedback_core::encoding::{EpisodeId, StandardizedFeedback, Target};
use feedback_core::gridworld::{
    sample_index, skill_ladder, value_iteration, EpisodeRecord, GridSpec, ValueTable,
};
use feedback_core::rationality::{
    boltzmann_prob, fit_beta, ChoiceContext, ChoiceObservation, Dependency, FitOptions,
};
use feedback_core::translator::{translate, IdAllocator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;

/// Skill-ladder rollouts per policy in the shared episode pool.
pub const POOL_PER_LEVEL: usize = 60;
pub const POOL_SEED: u64 = 100;

pub struct Pool {
    pub spec: GridSpec,
    pub values: ValueTable,
    pub episodes: Vec<EpisodeRecord>,
}

impl Pool {
    pub fn default_8x8() -> Self {
        let spec = GridSpec::default_8x8();
        let values = value_iteration(&spec, 1e-9);
        let episodes = skill_ladder(&spec, &values, POOL_PER_LEVEL, POOL_SEED);
        Pool { spec, values, episodes }
    }

    pub fn buffer(&self) -> HashMap<EpisodeId, EpisodeRecord> {
        self.episodes.iter().map(|e| (e.id.clone(), e.clone())).collect()
    }

    /// Two distinct episode indices.
    pub fn pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let n = self.episodes.len();
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        (i, j)
    }
}

pub fn boltzmann() -> Result<Check, String> {
    let p = boltzmann_prob(&[1.0, 0.0], 3f64.ln());
    let err = (p[0] - 0.75).abs().max((p[1] - 0.25).abs());
    let ln3_ok = err <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut uniform_bad = 0;
    let mut mono_bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..9);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let p0 = boltzmann_prob(&u, 0.0);
        if p0.iter().any(|p| (p - 1.0 / n as f64).abs() > 1e-15) {
            uniform_bad += 1;
        }
        // Mass on the best option and the expected utility never fall as β grows.
        let best = (0..n).max_by(|&a, &b| u[a].total_cmp(&u[b])).expect("non-empty");
        let b1 = rng.random_range(0.0..20.0);
        let b2 = b1 + rng.random_range(0.0..20.0);
        let (q1, q2) = (boltzmann_prob(&u, b1), boltzmann_prob(&u, b2));
        let eu = |q: &[f64]| q.iter().zip(&u).map(|(p, x)| p * x).sum::<f64>();
        if q2[best] < q1[best] - 1e-12 || eu(&q2) < eu(&q1) - 1e-12 {
            mono_bad += 1;
        }
    }
    Ok(Check::new(
        ln3_ok && uniform_bad == 0 && mono_bad == 0,
        format!(
            "ln3 error {err:.1e}, β=0 non-uniform {uniform_bad}/1000, monotonicity violations {mono_bad}/1000"
        ),
    ))
}

const C3_BETAS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
const C3_CHOICES: usize = 2000;
const C3_SEEDS: u64 = 20;

/// Pairwise choices between random pool episodes, with whole-episode ground
/// truth returns as utilities.
pub fn simulate_pairs(pool: &Pool, beta: f64, n: usize, seed: u64) -> Vec<ChoiceObservation> {
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("sim", beta, seed), "sim");
    let mut pick = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    (0..n)
        .map(|_| {
            let (i, j) = pool.pair(&mut pick);
            let (ei, ej) = (&pool.episodes[i], &pool.episodes[j]);
            a.pairwise_choice(ei.total_return, ej.total_return, &pool.spec.name)
        })
        .collect()
}

pub fn beta_recovery() -> Result<Check, String> {
    let pool = Pool::default_8x8();
    let mut passed = true;
    let mut parts = Vec::new();
    let mut notes = Vec::new();
    for beta in C3_BETAS {
        let mut hits = 0;
        let mut rel_se = 0.0;
        for seed in 0..C3_SEEDS {
            let obs = simulate_pairs(&pool, beta, C3_CHOICES, seed);
            let est = fit_beta(&obs, &FitOptions::default()).map_err(|e| e.to_string())?;
            let dev = (est.beta_hat - beta).abs();
            if dev <= 0.1 * beta && dev <= 3.0 * est.stderr {
                hits += 1;
            }
            rel_se += est.stderr / beta / C3_SEEDS as f64;
        }
        passed &= hits >= 18;
        parts.push(format!("β={beta}: {hits}/{C3_SEEDS}"));
        notes.push(format!(
            "β={beta}: mean stderr is {:.1}% of β, so ±10% spans {:.2} standard errors",
            100.0 * rel_se,
            0.1 / rel_se
        ));
    }
    let mut check = Check::new(passed, parts.join(", ") + " within ±10% and 3 SE (need ≥18)");
    for n in notes {
        check = check.note(n);
    }
    Ok(check)
}

const C4_TYPES: [(&str, f64); 2] = [("comparative", 1.0), ("corrective", 3.0)];
const C4_PHASES: [(u32, f64); 2] = [(0, 2.0), (1, 4.0)];
const C4_PER_CELL: usize = 2000;

/// Full-factorial choices over feedback type × progress phase. Each cell's
/// chooser uses `β = ½ β_type + ½ β_progress`.
pub fn simulate_factorial(
    pool: &Pool,
    types: &[(&str, f64)],
    phases: &[(u32, f64)],
    per_cell: usize,
    seed: u64,
) -> Vec<ChoiceObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &(ty, bt) in types {
        for &(phase, bp) in phases {
            let beta = 0.5 * bt + 0.5 * bp;
            for _ in 0..per_cell {
                let (i, j) = pool.pair(&mut rng);
                let u = vec![pool.episodes[i].total_return, pool.episodes[j].total_return];
                let chosen = sample_index(&boltzmann_prob(&u, beta), &mut rng);
                out.push(ChoiceObservation {
                    utilities: u,
                    chosen,
                    context: ChoiceContext {
                        feedback_type: ty.into(),
                        task_id: pool.spec.name.clone(),
                        progress_phase: phase,
                        user_id: "sim".into(),
                    },
                });
            }
        }
    }
    out
}

/// Per-level means of the generating cell β, averaged over the other
/// dependency: what a marginal-mean decomposition can identify.
pub fn marginal_mean_oracle(types: &[(&str, f64)], phases: &[(u32, f64)]) -> BTreeMap<(Dependency, String), f64> {
    let cell = |bt: f64, bp: f64| 0.5 * bt + 0.5 * bp;
    let mut out = BTreeMap::new();
    for &(ty, bt) in types {
        let m = phases.iter().map(|&(_, bp)| cell(bt, bp)).sum::<f64>() / phases.len() as f64;
        out.insert((Dependency::Type, ty.to_string()), m);
    }
    for &(p, bp) in phases {
        let m = types.iter().map(|&(_, bt)| cell(bt, bp)).sum::<f64>() / types.len() as f64;
        out.insert((Dependency::Progress, p.to_string()), m);
    }
    out
}

pub fn decomposition_recovery() -> Result<Check, String> {
    let pool = Pool::default_8x8();
    let obs = simulate_factorial(&pool, &C4_TYPES, &C4_PHASES, C4_PER_CELL, 4);
    let report = beta_report(&obs, &FitOptions::default()).map_err(|e| e.to_string())?;
    let truth: BTreeMap<(Dependency, String), f64> = C4_TYPES
        .iter()
        .map(|&(t, b)| ((Dependency::Type, t.to_string()), b))
        .chain(C4_PHASES.iter().map(|&(p, b)| ((Dependency::Progress, p.to_string()), b)))
        .collect();
    let oracle = marginal_mean_oracle(&C4_TYPES, &C4_PHASES);
    let recovered = |d: Dependency, v: &str| {
        report
            .decomposition
            .components
            .get(&d)
            .and_then(|c| c.values.get(v))
            .copied()
    };
    let mut passed = true;
    let mut parts = Vec::new();
    let mut oracle_ok = true;
    for ((d, v), want) in &truth {
        let Some(got) = recovered(*d, v) else {
            return Err(format!("no component for {}={v}", d.name()));
        };
        let ok = (got - want).abs() <= 0.15 * want;
        passed &= ok;
        parts.push(format!("{}={v}: {got:.3} vs {want}", d.name()));
        let m = oracle[&(*d, v.clone())];
        oracle_ok &= (got - m).abs() <= 0.15 * m;
    }
    Ok(Check::new(passed, parts.join(", ") + " (±15%)").note(format!(
        "against the marginal-mean oracle ({}) every component is {} ±15%",
        oracle
            .iter()
            .map(|((d, v), m)| format!("{}={v}: {m}", d.name()))
            .collect::<Vec<_>>()
            .join(", "),
        if oracle_ok { "within" } else { "NOT within" }
    )))
}

const C10_PAIRS: usize = 1000;

/// Translated records of two responses per distinct episode pair.
fn repeat_records(pool: &Pool, beta: f64, identical: bool, seed: u64) -> Result<Vec<StandardizedFeedback>, String> {
    let config = ExperimentConfig {
        enabled_feedback_types: BTreeSet::from([FeedbackKind::Comparative]),
        ..Default::default()
    };
    let buffer = pool.buffer();
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("repeater", beta, seed), "c10");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut ids = IdAllocator::default();
    let mut out = Vec::new();
    while seen.len() < C10_PAIRS {
        let (i, j) = pool.pair(&mut rng);
        if !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        let options = [
            (Target::episode(pool.episodes[i].id.clone()), pool.episodes[i].total_return),
            (Target::episode(pool.episodes[j].id.clone()), pool.episodes[j].total_return),
        ];
        let first = a.annotate_comparative(&options);
        let second = if identical { first.clone() } else { a.annotate_comparative(&options) };
        for ev in [first, second] {
            let t = translate(&ev, &config, &pool.spec, &buffer, &mut ids).map_err(|e| e.to_string())?;
            out.extend(t.records);
        }
    }
    Ok(out)
}

pub fn consistency_baseline() -> Result<Check, String> {
    let pool = Pool::default_8x8();
    let score = |records: &[StandardizedFeedback]| -> Result<(usize, f64), String> {
        match consistency_table(records).as_slice() {
            [row] => Ok((row.groups, row.score)),
            rows => Err(format!("expected one user, got {}", rows.len())),
        }
    };
    let (groups, random) = score(&repeat_records(&pool, 0.0, false, 10)?)?;
    let (same_groups, same) = score(&repeat_records(&pool, 0.0, true, 11)?)?;
    Ok(Check::new(
        groups == C10_PAIRS && same_groups == C10_PAIRS && (random - 0.5).abs() <= 0.05 && same == 1.0,
        format!("β=0 repeats {random:.4} over {groups} pairs (0.5 ± 0.05), identical repeats {same} over {same_groups} pairs"),
    ))
}
