//! Per-type loss terms as functions of the per-cell predictions.
//!
//! Each term returns its value together with `∂L/∂r(c)` for every cell;
//! [`LossGrad::param_grad`] maps that to parameter space.

use serde::{Deserialize, Serialize};

use crate::buffer::EpisodeSource;
use crate::encoding::EpisodeId;
use crate::rationality::log_sum_exp;
use crate::sampler::LossScorer;

use super::dataset::{DemoItem, DescrItem, EvalItem, ItemRef, PairItem, PreparedDataset};
use super::ensemble::Ensemble;
use super::{RewardModel, RewardModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// Gradient with respect to each cell's predicted reward.
    pub cell_grads: Vec<f64>,
}

impl LossGrad {
    pub fn zero(n_cells: usize) -> Self {
        LossGrad {
            value: 0.0,
            cell_grads: vec![0.0; n_cells],
        }
    }

    pub fn param_grad(&self, model: &RewardModel) -> Vec<f64> {
        model.backprop(&self.cell_grads)
    }

    fn scale(mut self, s: f64) -> Self {
        self.value *= s;
        for g in &mut self.cell_grads {
            *g *= s;
        }
        self
    }
}

fn softplus(x: f64) -> f64 {
    log_sum_exp(&[0.0, x])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn eval_item(preds: &[f64], it: &EvalItem, scale: f64, grads: &mut [f64]) -> f64 {
    let resid = it.cells.dot(preds) - it.score;
    it.cells.scatter(scale * 2.0 * resid, grads);
    resid * resid
}

/// `-ln σ(R_w - R_l)`, i.e. `softplus(R_l - R_w)`.
pub(crate) fn pair_item(preds: &[f64], it: &PairItem, scale: f64, grads: &mut [f64]) -> f64 {
    let d = it.loser.dot(preds) - it.winner.dot(preds);
    let s = sigmoid(d);
    it.loser.scatter(scale * s, grads);
    it.winner.scatter(-scale * s, grads);
    softplus(d)
}

pub(crate) fn demo_item(preds: &[f64], it: &DemoItem, scale: f64, grads: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for &(i, w) in &it.cells.0 {
        let e = preds[i] - 1.0;
        loss += it.optimality * w * e * e;
        grads[i] += scale * it.optimality * w * 2.0 * e;
    }
    loss
}

pub(crate) fn descr_item(preds: &[f64], it: &DescrItem, scale: f64, grads: &mut [f64]) -> f64 {
    if it.pairs.is_empty() {
        return 0.0;
    }
    let per = 1.0 / it.pairs.len() as f64;
    let mut loss = 0.0;
    for &(on, off) in &it.pairs {
        let gap = it.margin - it.importance * (preds[on] - preds[off]);
        if gap > 0.0 {
            loss += per * gap;
            grads[on] -= scale * per * it.importance;
            grads[off] += scale * per * it.importance;
        }
    }
    loss
}

pub(crate) fn mean_term<'a, T: 'a>(
    preds: &[f64],
    items: impl ExactSizeIterator<Item = &'a T>,
    f: impl Fn(&[f64], &T, f64, &mut [f64]) -> f64,
) -> LossGrad {
    let mut out = LossGrad::zero(preds.len());
    if items.len() == 0 {
        return out;
    }
    let scale = 1.0 / items.len() as f64;
    out.value = items.map(|it| f(preds, it, scale, &mut out.cell_grads)).sum::<f64>() * scale;
    out
}

/// Mean over items of `(mean per-step predicted reward - score)²`.
pub fn loss_evaluative(model: &RewardModel, items: &[EvalItem]) -> LossGrad {
    mean_term(&model.predict_all(), items.iter(), eval_item)
}

/// Mean Bradley-Terry negative log-likelihood over preference pairs.
pub fn loss_comparative(model: &RewardModel, pairs: &[PairItem]) -> LossGrad {
    mean_term(&model.predict_all(), pairs.iter(), pair_item)
}

/// Demonstration regression toward +1 and correction preferences, averaged
/// over all instructive items.
pub fn loss_instructive(model: &RewardModel, demos: &[DemoItem], corrections: &[PairItem]) -> LossGrad {
    let preds = model.predict_all();
    instructive_on(&preds, demos, corrections)
}

pub(crate) fn instructive_on(preds: &[f64], demos: &[DemoItem], corrections: &[PairItem]) -> LossGrad {
    instructive_iter(preds, demos.iter(), corrections.iter())
}

pub(crate) fn instructive_iter<'a>(
    preds: &[f64],
    demos: impl ExactSizeIterator<Item = &'a DemoItem>,
    corrections: impl ExactSizeIterator<Item = &'a PairItem>,
) -> LossGrad {
    let n = demos.len() + corrections.len();
    let mut out = LossGrad::zero(preds.len());
    if n == 0 {
        return out;
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for it in demos {
        total += demo_item(preds, it, scale, &mut out.cell_grads);
    }
    for it in corrections {
        total += pair_item(preds, it, scale, &mut out.cell_grads);
    }
    out.value = total * scale;
    out
}

/// Mean hinge penalty between brushed cells and their baselines.
pub fn loss_descriptive(model: &RewardModel, items: &[DescrItem]) -> LossGrad {
    mean_term(&model.predict_all(), items.iter(), descr_item)
}

pub(crate) fn evaluative_on(preds: &[f64], items: &[EvalItem]) -> LossGrad {
    mean_term(preds, items.iter(), eval_item)
}

pub(crate) fn comparative_on(preds: &[f64], items: &[PairItem]) -> LossGrad {
    mean_term(preds, items.iter(), pair_item)
}

pub(crate) fn descriptive_on(preds: &[f64], items: &[DescrItem]) -> LossGrad {
    mean_term(preds, items.iter(), descr_item)
}

pub(crate) fn weighted(parts: &[(f64, LossGrad)], n_cells: usize) -> LossGrad {
    let mut out = LossGrad::zero(n_cells);
    for (w, p) in parts {
        let p = p.clone().scale(*w);
        out.value += p.value;
        for (o, g) in out.cell_grads.iter_mut().zip(&p.cell_grads) {
            *o += g;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLoss {
    pub value: f64,
    /// No feedback touches the episode and no ensemble was available.
    pub cold_start: bool,
    pub n_items: usize,
}

fn item_loss(preds: &[f64], ds: &PreparedDataset, r: ItemRef) -> f64 {
    let mut sink = vec![0.0; preds.len()];
    match r {
        ItemRef::Eval(i) => eval_item(preds, &ds.evaluative[i], 0.0, &mut sink),
        ItemRef::Pair(i) => pair_item(preds, &ds.comparative[i], 0.0, &mut sink),
        ItemRef::Correction(i) => pair_item(preds, &ds.corrections[i], 0.0, &mut sink),
        ItemRef::Demo(i) => demo_item(preds, &ds.demonstrations[i], 0.0, &mut sink),
        ItemRef::Descr(i) => descr_item(preds, &ds.descriptive[i], 0.0, &mut sink),
    }
}

/// Mean loss of the items that reference `id`. Untouched episodes score the
/// ensemble's disagreement on their mean per-step reward, or 0 with the
/// cold-start flag when there is no ensemble.
pub fn per_episode_loss(
    model: &RewardModel,
    id: &EpisodeId,
    dataset: &PreparedDataset,
    source: &dyn EpisodeSource,
    ensemble: Option<&Ensemble>,
) -> Result<EpisodeLoss, RewardModelError> {
    if source.episode_len(id).is_none() {
        return Err(crate::buffer::BufferError::NotFound(id.clone()).into());
    }
    let preds = model.predict_all();
    let items = dataset.items_for(id);
    if !items.is_empty() {
        let total: f64 = items.iter().map(|&r| item_loss(&preds, dataset, r)).sum();
        return Ok(EpisodeLoss {
            value: total / items.len() as f64,
            cold_start: false,
            n_items: items.len(),
        });
    }
    match ensemble {
        Some(e) if e.len() > 1 => {
            let ep = source.fetch(id)?;
            let cells: Vec<_> = ep.entered_cells().collect();
            Ok(EpisodeLoss {
                value: e.disagreement(&cells),
                cold_start: false,
                n_items: 0,
            })
        }
        _ => Ok(EpisodeLoss {
            value: 0.0,
            cold_start: true,
            n_items: 0,
        }),
    }
}

/// Query-based sampling oracle backed by a trained model.
pub struct ModelScorer<'a> {
    pub model: &'a RewardModel,
    pub dataset: &'a PreparedDataset,
    pub source: &'a dyn EpisodeSource,
    pub ensemble: Option<&'a Ensemble>,
}

impl LossScorer for ModelScorer<'_> {
    fn episode_loss(&self, id: &EpisodeId) -> EpisodeLoss {
        per_episode_loss(self.model, id, self.dataset, self.source, self.ensemble).unwrap_or(EpisodeLoss {
            value: 0.0,
            cold_start: true,
            n_items: 0,
        })
    }
}
