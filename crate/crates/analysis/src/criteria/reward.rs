use feedback_core::analysis::evaluate_reward;
use feedback_core::annotator::{AnnotatorProfile, SimulatedAnnotator};
use feedback_core::config::{ExperimentConfig, FeedbackKind};
use feedback_core::encoding::{EpisodeId, Target};
use feedback_core::gridworld::GridSpec;
use feedback_core::reward_model::*;
use feedback_core::stats::spearman;
use feedback_core::translator::{translate, IdAllocator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rationality::Pool;
use super::Check;

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const FD_POINTS: usize = 20;
/// Coordinates checked per model; larger models are strided.
const FD_COORDS: usize = 120;

fn random_weights(rng: &mut ChaCha8Rng, n_cells: usize, len: usize) -> CellWeights {
    let mut w: Vec<(usize, f64)> = Vec::new();
    for _ in 0..len {
        let i = rng.random_range(0..n_cells);
        match w.iter_mut().find(|(j, _)| *j == i) {
            Some((_, x)) => *x += 1.0,
            None => w.push((i, 1.0)),
        }
    }
    w.sort_by_key(|(i, _)| *i);
    CellWeights(w)
}

fn ep(n: u64) -> EpisodeId {
    EpisodeId::new("default-8x8", "fd", 0, 0, n)
}

fn eval_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalItem> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..12);
            let mut cells = random_weights(rng, 64, len);
            cells.0.iter_mut().for_each(|(_, w)| *w /= len as f64);
            EvalItem {
                feedback_id: i as u64,
                episodes: vec![ep(i as u64)],
                cells,
                score: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

fn pair_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<PairItem> {
    (0..n)
        .map(|i| {
            let (lw, ll) = (rng.random_range(1..10), rng.random_range(1..10));
            PairItem {
                feedback_id: i as u64,
                episodes: vec![ep(2 * i as u64), ep(2 * i as u64 + 1)],
                winner: random_weights(rng, 64, lw),
                loser: random_weights(rng, 64, ll),
            }
        })
        .collect()
}

fn demo_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<DemoItem> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..10);
            DemoItem {
                feedback_id: i as u64,
                episodes: vec![],
                cells: random_weights(rng, 64, len),
                optimality: rng.random_range(0.0..=1.0),
            }
        })
        .collect()
}

fn descr_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<DescrItem> {
    (0..n)
        .map(|i| DescrItem {
            feedback_id: i as u64,
            episodes: vec![],
            pairs: (0..rng.random_range(1..5))
                .map(|_| (rng.random_range(0..64), rng.random_range(0..64)))
                .collect(),
            importance: rng.random_range(-1.0..=1.0),
            margin: 0.1,
        })
        .collect()
}

/// Linear and MLP models over both feature maps, at random parameters.
fn random_models(spec: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<RewardModel> {
    let mut out = Vec::new();
    for features in [FeatureKind::OnehotCell, FeatureKind::CellPlusLocalWindow { radius: 1 }] {
        let mut lin = RewardModel::linear(FeatureMap::new(features, spec));
        lin.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        out.push(lin);
        let mut mlp = RewardModel::mlp(FeatureMap::new(features, spec), 8, rng.random());
        mlp.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-0.5..0.5));
        out.push(mlp);
    }
    out
}

/// Largest relative deviation between the analytic gradient and central
/// differences.
fn fd_error(model: &RewardModel, loss: &dyn Fn(&RewardModel) -> LossGrad) -> f64 {
    let analytic = loss(model).param_grad(model);
    let scale = analytic.iter().fold(0.0f64, |a, g| a.max(g.abs())).max(1e-8);
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    let n = model.n_params();
    for i in (0..n).step_by(n.div_ceil(FD_COORDS).max(1)) {
        let p = model.params()[i];
        m.params_mut()[i] = p + FD_STEP;
        let up = loss(&m).value;
        m.params_mut()[i] = p - FD_STEP;
        let down = loss(&m).value;
        m.params_mut()[i] = p;
        let fd = (up - down) / (2.0 * FD_STEP);
        let denom = fd.abs().max(analytic[i].abs()).max(scale * 1e-3);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

pub fn gradient_checks() -> Result<Check, String> {
    let spec = GridSpec::default_8x8();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 4];
    for _ in 0..FD_POINTS {
        for m in random_models(&spec, &mut rng) {
            let ev = eval_items(&mut rng, 12);
            let pairs = pair_items(&mut rng, 12);
            let (demos, corr) = (demo_items(&mut rng, 6), pair_items(&mut rng, 6));
            let descr = descr_items(&mut rng, 12);
            let errs = [
                fd_error(&m, &|m| loss_evaluative(m, &ev)),
                fd_error(&m, &|m| loss_comparative(m, &pairs)),
                fd_error(&m, &|m| loss_instructive(m, &demos, &corr)),
                fd_error(&m, &|m| loss_descriptive(m, &descr)),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
    }
    let names = ["evaluative", "comparative", "instructive", "descriptive"];
    Ok(Check::new(
        worst.iter().all(|&e| e < FD_TOL),
        format!(
            "worst relative error over {FD_POINTS} points × 4 models: {} (need < 1e-4)",
            names
                .iter()
                .zip(worst)
                .map(|(n, e)| format!("{n} {e:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ))
}

pub const C6_PAIRS: usize = 5000;
pub const C6_BETA: f64 = 5.0;

/// Options used for the end-to-end run: plain full-batch gradient descent.
pub fn c6_train_options() -> TrainOptions {
    TrainOptions {
        lr: 1.0,
        steps: 2000,
        batch: usize::MAX,
        seed: 0,
        l2: 1e-4,
        ..TrainOptions::default()
    }
}

pub fn reward_learning() -> Result<Check, String> {
    let pool = Pool::default_8x8();
    let spec = &pool.spec;
    let buffer = pool.buffer();
    let config = ExperimentConfig {
        enabled_feedback_types: [FeedbackKind::Comparative].into(),
        ..Default::default()
    };
    let mut a = SimulatedAnnotator::new(AnnotatorProfile::uniform("c6", C6_BETA, 6), "c6");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ids = IdAllocator::default();
    let mut records = Vec::with_capacity(C6_PAIRS);
    for _ in 0..C6_PAIRS {
        let (i, j) = pool.pair(&mut rng);
        let options = [
            (Target::episode(pool.episodes[i].id.clone()), pool.episodes[i].total_return),
            (Target::episode(pool.episodes[j].id.clone()), pool.episodes[j].total_return),
        ];
        let ev = a.annotate_comparative(&options);
        records.extend(translate(&ev, &config, spec, &buffer, &mut ids).map_err(|e| e.to_string())?.records);
    }
    let data = PreparedDataset::build(&records, &buffer, spec, &DatasetOptions::default()).map_err(|e| e.to_string())?;
    let model = RewardModel::linear(FeatureMap::new(FeatureKind::OnehotCell, spec));
    let (model, _) = train(&model, &data, &LossWeights::only(0.0, 1.0, 0.0, 0.0), &c6_train_options())
        .map_err(|e| e.to_string())?;
    let eval = evaluate_reward(spec, |c| model.predict_cell(c));
    let rho = eval.spearman_vs_vstar;
    let passed = rho.is_some_and(|r| r >= 0.9) && eval.return_ratio >= 0.8;

    // Diagnostics: the ground-truth reward scored the same way, and the
    // planned value of the learned reward against V*.
    let truth = evaluate_reward(spec, |c| spec.reward_for(c));
    let learned_plan = model.plan(spec, 1e-9);
    let vstar = feedback_core::gridworld::value_iteration(spec, 1e-10);
    let floor = spec.floor_cells();
    let planned: Vec<f64> = floor.iter().map(|&c| learned_plan.value(c)).collect();
    let optimal: Vec<f64> = floor.iter().map(|&c| vstar.value(c)).collect();
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    Ok(Check::new(
        passed,
        format!(
            "{} pairs: Spearman(learned reward, V*) {} (need ≥ 0.9), return ratio {:.3} (need ≥ 0.8)",
            data.comparative.len(),
            fmt(rho),
            eval.return_ratio
        ),
    )
    .note(format!(
        "the ground-truth reward itself scores Spearman {} and ratio {:.3}: it is constant on floor cells",
        fmt(truth.spearman_vs_vstar),
        truth.return_ratio
    ))
    .note(format!(
        "planned value of the learned reward vs V*: Spearman {}",
        fmt(spearman(&planned, &optimal))
    )))
}
