//! Minibatch gradient descent on the weighted multi-type objective.
//!
//! Every `log_every` steps the full objective is evaluated. A rise reverts
//! to the best parameters and halves the learning rate; a plateau halves it
//! too. The logged objective is therefore non-increasing.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::PreparedDataset;
use super::losses::{
    comparative_on, descr_item, descriptive_on, eval_item, evaluative_on, instructive_iter, instructive_on,
    mean_term, pair_item, weighted, LossGrad,
};
use super::{RewardModel, RewardModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub evaluative: f64,
    pub comparative: f64,
    pub instructive: f64,
    pub descriptive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            evaluative: 1.0,
            comparative: 1.0,
            instructive: 1.0,
            descriptive: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only(evaluative: f64, comparative: f64, instructive: f64, descriptive: f64) -> Self {
        LossWeights {
            evaluative,
            comparative,
            instructive,
            descriptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub l2: f64,
    pub log_every: usize,
    /// Relative improvement below which a check counts as a plateau.
    pub plateau_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 1e-2,
            steps: 2000,
            batch: 64,
            seed: 0,
            l2: 1e-4,
            log_every: 10,
            plateau_tol: 1e-9,
        }
    }
}

/// Objective after `step` updates. Per-type entries are unweighted and only
/// present for active terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluative: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparative: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptive: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    eval: bool,
    comp: bool,
    instr: bool,
    descr: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    eval: Option<f64>,
    comp: Option<f64>,
    instr: Option<f64>,
    descr: Option<f64>,
    total: f64,
}

fn l2_norm_sq(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum()
}

/// Mean term over all items, or over the sampled indices.
fn term<T>(
    preds: &[f64],
    items: &[T],
    idx: Option<&[usize]>,
    f: impl Fn(&[f64], &T, f64, &mut [f64]) -> f64,
) -> LossGrad {
    match idx {
        None => mean_term(preds, items.iter(), f),
        Some(ix) => mean_term(preds, ix.iter().map(|&i| &items[i]), f),
    }
}

struct Objective<'a> {
    data: &'a PreparedDataset,
    w: LossWeights,
    act: Active,
    l2: f64,
}

impl Objective<'_> {
    fn full(&self, model: &RewardModel) -> Parts {
        let preds = model.predict_all();
        let d = self.data;
        let mut p = Parts::default();
        if self.act.eval {
            p.eval = Some(evaluative_on(&preds, &d.evaluative).value);
        }
        if self.act.comp {
            p.comp = Some(comparative_on(&preds, &d.comparative).value);
        }
        if self.act.instr {
            p.instr = Some(instructive_on(&preds, &d.demonstrations, &d.corrections).value);
        }
        if self.act.descr {
            p.descr = Some(descriptive_on(&preds, &d.descriptive).value);
        }
        p.total = self.w.evaluative * p.eval.unwrap_or(0.0)
            + self.w.comparative * p.comp.unwrap_or(0.0)
            + self.w.instructive * p.instr.unwrap_or(0.0)
            + self.w.descriptive * p.descr.unwrap_or(0.0)
            + self.l2 * l2_norm_sq(model.params());
        p
    }

    /// Parameter gradient of the objective on one minibatch.
    fn minibatch_grad(&self, model: &RewardModel, batch: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.data;
        let preds = model.predict_all();
        let mut sample = |n: usize| (batch < n).then(|| index::sample(rng, n, batch).into_vec());
        let mut parts: Vec<(f64, LossGrad)> = Vec::new();
        if self.act.eval {
            let ix = sample(d.evaluative.len());
            parts.push((self.w.evaluative, term(&preds, &d.evaluative, ix.as_deref(), eval_item)));
        }
        if self.act.comp {
            let ix = sample(d.comparative.len());
            parts.push((self.w.comparative, term(&preds, &d.comparative, ix.as_deref(), pair_item)));
        }
        if self.act.instr {
            let nd = d.demonstrations.len();
            let g = match sample(d.n_instructive()) {
                None => instructive_on(&preds, &d.demonstrations, &d.corrections),
                Some(ix) => {
                    let demos: Vec<&_> = ix.iter().filter(|&&i| i < nd).map(|&i| &d.demonstrations[i]).collect();
                    let corr: Vec<&_> = ix.iter().filter(|&&i| i >= nd).map(|&i| &d.corrections[i - nd]).collect();
                    instructive_iter(&preds, demos.into_iter(), corr.into_iter())
                }
            };
            parts.push((self.w.instructive, g));
        }
        if self.act.descr {
            let ix = sample(d.descriptive.len());
            parts.push((self.w.descriptive, term(&preds, &d.descriptive, ix.as_deref(), descr_item)));
        }
        let mut g = weighted(&parts, preds.len()).param_grad(model);
        for (gi, p) in g.iter_mut().zip(model.params()) {
            *gi += 2.0 * self.l2 * p;
        }
        g
    }
}

fn entry(step: usize, lr: f64, p: &Parts) -> TrainLogEntry {
    TrainLogEntry {
        step,
        lr,
        total: p.total,
        evaluative: p.eval,
        comparative: p.comp,
        instructive: p.instr,
        descriptive: p.descr,
    }
}

/// Trains a copy of `model`. Deterministic for a fixed seed.
pub fn train(
    model: &RewardModel,
    data: &PreparedDataset,
    weights: &LossWeights,
    opts: &TrainOptions,
) -> Result<(RewardModel, Vec<TrainLogEntry>), RewardModelError> {
    let w = *weights;
    if [w.evaluative, w.comparative, w.instructive, w.descriptive].iter().all(|x| *x <= 0.0) {
        return Err(RewardModelError::NoActiveWeights);
    }
    let act = Active {
        eval: w.evaluative > 0.0 && !data.evaluative.is_empty(),
        comp: w.comparative > 0.0 && !data.comparative.is_empty(),
        instr: w.instructive > 0.0 && data.n_instructive() > 0,
        descr: w.descriptive > 0.0 && !data.descriptive.is_empty(),
    };
    if !(act.eval || act.comp || act.instr || act.descr) {
        return Err(RewardModelError::EmptyDataset);
    }
    let obj = Objective {
        data,
        w,
        act,
        l2: opts.l2,
    };
    let log_every = opts.log_every.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut m = model.clone();
    m.l2_coef = opts.l2;
    let mut lr = opts.lr;
    let mut best = m.params().to_vec();
    let mut best_parts = obj.full(&m);
    let mut log = vec![entry(0, lr, &best_parts)];

    for step in 1..=opts.steps {
        let g = obj.minibatch_grad(&m, opts.batch.max(1), &mut rng);
        for (p, gi) in m.params_mut().iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        if step % log_every == 0 || step == opts.steps {
            let parts = obj.full(&m);
            if !parts.total.is_finite() || parts.total > best_parts.total {
                m.params_mut().copy_from_slice(&best);
                lr *= 0.5;
            } else {
                let gain = best_parts.total - parts.total;
                if gain <= opts.plateau_tol * best_parts.total.abs().max(1.0) {
                    lr *= 0.5;
                }
                best.copy_from_slice(m.params());
                best_parts = parts;
            }
            log.push(entry(step, lr, &best_parts));
        }
    }
    m.params_mut().copy_from_slice(&best);
    m.training_log = log.clone();
    Ok((m, log))
}
