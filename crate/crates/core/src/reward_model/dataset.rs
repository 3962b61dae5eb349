//! Turns feedback records into loss items over cell indices.

use std::collections::{BTreeMap, HashMap};

use crate::buffer::EpisodeSource;
use crate::encoding::{
    ContentLevel, EpisodeId, FeedbackContent, Intention, Relation, StandardizedFeedback, Target, TargetScope,
};
use crate::gridworld::{Cell, GridSpec};
use crate::translator::{correction_to_preference, entered, expand_ranking};

use super::RewardModelError;

/// Sparse non-negative weights over cell indices, sorted by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellWeights(pub Vec<(usize, f64)>);

impl CellWeights {
    /// Each occurrence of a cell adds `scale`.
    pub fn from_cells(cells: &[Cell], spec: &GridSpec, scale: f64) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for &c in cells {
            if spec.in_bounds(c) {
                *acc.entry(spec.cell_index(c)).or_default() += scale;
            }
        }
        CellWeights(acc.into_iter().collect())
    }

    pub fn dot(&self, preds: &[f64]) -> f64 {
        self.0.iter().map(|&(i, w)| w * preds[i]).sum()
    }

    /// Adds `alpha · weights` into a dense gradient.
    pub fn scatter(&self, alpha: f64, grads: &mut [f64]) {
        for &(i, w) in &self.0 {
            grads[i] += alpha * w;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Absolute score regressed against the mean per-step reward of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub feedback_id: u64,
    pub episodes: Vec<EpisodeId>,
    /// Cell counts divided by the number of steps.
    pub cells: CellWeights,
    pub score: f64,
}

/// Preference between two cell sequences; weights are visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairItem {
    pub feedback_id: u64,
    pub episodes: Vec<EpisodeId>,
    pub winner: CellWeights,
    pub loser: CellWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoItem {
    pub feedback_id: u64,
    pub episodes: Vec<EpisodeId>,
    /// Cell counts divided by the number of steps.
    pub cells: CellWeights,
    pub optimality: f64,
}

/// Hinge constraints between brushed cells and their unbrushed baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct DescrItem {
    pub feedback_id: u64,
    pub episodes: Vec<EpisodeId>,
    /// (brushed cell, nearest unbrushed floor cell), by index.
    pub pairs: Vec<(usize, usize)>,
    pub importance: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub margin: f64,
    /// Optimality assumed for instruction records without one.
    pub default_optimality: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            margin: 0.1,
            default_optimality: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ItemRef {
    Eval(usize),
    Pair(usize),
    Correction(usize),
    Demo(usize),
    Descr(usize),
}

/// Loss items grouped by term, with an index from episodes to items.
#[derive(Debug, Clone, Default)]
pub struct PreparedDataset {
    pub evaluative: Vec<EvalItem>,
    pub comparative: Vec<PairItem>,
    pub demonstrations: Vec<DemoItem>,
    pub corrections: Vec<PairItem>,
    pub descriptive: Vec<DescrItem>,
    /// Corrections dropped because the corrected segment equals the original.
    pub degenerate_corrections: usize,
    pub(crate) by_episode: HashMap<EpisodeId, Vec<ItemRef>>,
}

/// Reward-bearing cells of a target: the cells entered by its steps.
pub fn target_cells(target: &Target, source: &dyn EpisodeSource) -> Result<Vec<Cell>, RewardModelError> {
    let reference = target.episode_ref().ok_or_else(|| RewardModelError::WrongKind {
        feedback_id: 0,
        reason: "target does not reference an episode".into(),
    })?;
    let ep = source.fetch(reference)?;
    let cells: Vec<Cell> = ep.entered_cells().collect();
    let (lo, hi) = match target.scope {
        TargetScope::Episode { .. } => (0, cells.len()),
        TargetScope::Segment { start, end, .. } => (start as usize, end as usize),
        TargetScope::State { step, .. } => (step as usize, step as usize + 1),
        TargetScope::All => unreachable!("checked above"),
    };
    if lo >= hi || hi > cells.len() {
        return Err(crate::buffer::BufferError::Range {
            start: lo,
            end: hi,
            len: cells.len(),
        }
        .into());
    }
    Ok(cells[lo..hi].to_vec())
}

fn wrong(fb: &StandardizedFeedback, reason: &str) -> RewardModelError {
    RewardModelError::WrongKind {
        feedback_id: fb.feedback_id,
        reason: reason.into(),
    }
}

fn with_id<T>(fb: &StandardizedFeedback, r: Result<T, RewardModelError>) -> Result<T, RewardModelError> {
    r.map_err(|e| match e {
        RewardModelError::WrongKind { reason, .. } => RewardModelError::WrongKind {
            feedback_id: fb.feedback_id,
            reason,
        },
        other => other,
    })
}

fn refs(fb: &StandardizedFeedback) -> Vec<EpisodeId> {
    let mut v: Vec<EpisodeId> = fb.episode_refs().cloned().collect();
    v.sort();
    v.dedup();
    v
}

impl EvalItem {
    pub fn from_record(
        fb: &StandardizedFeedback,
        source: &dyn EpisodeSource,
        spec: &GridSpec,
    ) -> Result<Self, RewardModelError> {
        let (Intention::Evaluate | Intention::None, Relation::Absolute) = (fb.type_tag.intention, fb.type_tag.relation)
        else {
            return Err(wrong(fb, "evaluative loss needs absolute evaluate records"));
        };
        let FeedbackContent::Evaluation { score, .. } = fb.content else {
            return Err(wrong(fb, "evaluative loss needs an evaluation payload"));
        };
        let cells = with_id(fb, target_cells(&fb.targets[0], source))?;
        Ok(EvalItem {
            feedback_id: fb.feedback_id,
            episodes: refs(fb),
            cells: CellWeights::from_cells(&cells, spec, 1.0 / cells.len() as f64),
            score,
        })
    }
}

impl PairItem {
    /// One item per strictly ordered pair of a ranking record.
    pub fn from_ranking(
        fb: &StandardizedFeedback,
        source: &dyn EpisodeSource,
        spec: &GridSpec,
    ) -> Result<Vec<Self>, RewardModelError> {
        if fb.type_tag.intention != Intention::Evaluate {
            return Err(wrong(fb, "comparative loss needs evaluate records"));
        }
        let prefs = expand_ranking(fb).map_err(|_| wrong(fb, "comparative loss needs relative records"))?;
        prefs
            .into_iter()
            .map(|p| {
                let w = with_id(fb, target_cells(&p.winner, source))?;
                let l = with_id(fb, target_cells(&p.loser, source))?;
                let mut episodes: Vec<EpisodeId> =
                    [p.winner.episode_ref(), p.loser.episode_ref()].into_iter().flatten().cloned().collect();
                episodes.sort();
                episodes.dedup();
                Ok(PairItem {
                    feedback_id: fb.feedback_id,
                    episodes,
                    winner: CellWeights::from_cells(&w, spec, 1.0),
                    loser: CellWeights::from_cells(&l, spec, 1.0),
                })
            })
            .collect()
    }

    /// Corrected-versus-original pair; `None` for degenerate corrections.
    pub fn from_correction(
        fb: &StandardizedFeedback,
        source: &dyn EpisodeSource,
        spec: &GridSpec,
    ) -> Result<Option<Self>, RewardModelError> {
        let Some(pref) = correction_to_preference(fb, source, spec)? else {
            return Ok(None);
        };
        Ok(Some(PairItem {
            feedback_id: fb.feedback_id,
            episodes: refs(fb),
            winner: CellWeights::from_cells(&entered(&pref.winner), spec, 1.0),
            loser: CellWeights::from_cells(&entered(&pref.loser), spec, 1.0),
        }))
    }
}

impl DemoItem {
    pub fn from_record(
        fb: &StandardizedFeedback,
        source: &dyn EpisodeSource,
        spec: &GridSpec,
        default_optimality: f64,
    ) -> Result<Self, RewardModelError> {
        let FeedbackContent::Instruction { actions, .. } = &fb.content else {
            return Err(wrong(fb, "instructive loss needs an instruction payload"));
        };
        if fb.type_tag.intention != Intention::Instruct {
            return Err(wrong(fb, "instructive loss needs instruct records"));
        }
        let cells = with_id(fb, target_cells(&fb.targets[0], source))?;
        let given: Vec<f64> = actions.iter().filter_map(|a| a.optimality).collect();
        let optimality = if given.is_empty() {
            default_optimality
        } else {
            given.iter().sum::<f64>() / given.len() as f64
        };
        Ok(DemoItem {
            feedback_id: fb.feedback_id,
            episodes: refs(fb),
            cells: CellWeights::from_cells(&cells, spec, 1.0 / cells.len() as f64),
            optimality,
        })
    }
}

impl DescrItem {
    pub fn from_record(
        fb: &StandardizedFeedback,
        spec: &GridSpec,
        margin: f64,
    ) -> Result<Self, RewardModelError> {
        if fb.type_tag.content_level != ContentLevel::Feature {
            return Err(wrong(fb, "descriptive loss needs feature-level records"));
        }
        let (Some(mask), FeedbackContent::Description { importance, .. }) = (fb.content.feature_mask(), &fb.content)
        else {
            return Err(wrong(fb, "descriptive loss needs a description with a mask"));
        };
        let masked: Vec<Cell> = mask.cells.iter().copied().filter(|c| spec.in_bounds(*c)).collect();
        let baselines: Vec<Cell> = spec
            .floor_cells()
            .into_iter()
            .filter(|c| !masked.contains(c))
            .collect();
        let pairs = masked
            .iter()
            .filter_map(|&c| {
                let b = baselines.iter().min_by_key(|b| (b.manhattan(c), spec.cell_index(**b)))?;
                Some((spec.cell_index(c), spec.cell_index(*b)))
            })
            .collect();
        Ok(DescrItem {
            feedback_id: fb.feedback_id,
            episodes: refs(fb),
            pairs,
            importance: *importance,
            margin,
        })
    }
}

impl PreparedDataset {
    /// Sorts records into loss items. Records of intention `none` without a
    /// score are skipped.
    pub fn build(
        records: &[StandardizedFeedback],
        source: &dyn EpisodeSource,
        spec: &GridSpec,
        opts: &DatasetOptions,
    ) -> Result<Self, RewardModelError> {
        let mut ds = PreparedDataset::default();
        for fb in records {
            let tag = fb.type_tag;
            match (&fb.content, tag.intention) {
                (FeedbackContent::Ranking { .. }, _) => {
                    ds.comparative.extend(PairItem::from_ranking(fb, source, spec)?);
                }
                (FeedbackContent::Evaluation { .. }, _) => {
                    ds.evaluative.push(EvalItem::from_record(fb, source, spec)?);
                }
                (FeedbackContent::Instruction { .. }, Intention::Instruct) => {
                    let is_correction =
                        matches!(fb.targets.as_slice(), [t] if matches!(t.scope, TargetScope::State { .. }));
                    if is_correction {
                        match PairItem::from_correction(fb, source, spec)? {
                            Some(p) => ds.corrections.push(p),
                            None => ds.degenerate_corrections += 1,
                        }
                    } else {
                        ds.demonstrations
                            .push(DemoItem::from_record(fb, source, spec, opts.default_optimality)?);
                    }
                }
                (FeedbackContent::Description { .. }, Intention::Describe)
                    if tag.content_level == ContentLevel::Feature =>
                {
                    ds.descriptive.push(DescrItem::from_record(fb, spec, opts.margin)?);
                }
                _ => {}
            }
        }
        ds.reindex();
        Ok(ds)
    }

    pub fn from_items(
        evaluative: Vec<EvalItem>,
        comparative: Vec<PairItem>,
        demonstrations: Vec<DemoItem>,
        corrections: Vec<PairItem>,
        descriptive: Vec<DescrItem>,
    ) -> Self {
        let mut ds = PreparedDataset {
            evaluative,
            comparative,
            demonstrations,
            corrections,
            descriptive,
            ..Default::default()
        };
        ds.reindex();
        ds
    }

    fn reindex(&mut self) {
        let mut idx: HashMap<EpisodeId, Vec<ItemRef>> = HashMap::new();
        let mut add = |eps: &[EpisodeId], r: ItemRef| {
            for e in eps {
                idx.entry(e.clone()).or_default().push(r);
            }
        };
        for (i, it) in self.evaluative.iter().enumerate() {
            add(&it.episodes, ItemRef::Eval(i));
        }
        for (i, it) in self.comparative.iter().enumerate() {
            add(&it.episodes, ItemRef::Pair(i));
        }
        for (i, it) in self.corrections.iter().enumerate() {
            add(&it.episodes, ItemRef::Correction(i));
        }
        for (i, it) in self.demonstrations.iter().enumerate() {
            add(&it.episodes, ItemRef::Demo(i));
        }
        for (i, it) in self.descriptive.iter().enumerate() {
            add(&it.episodes, ItemRef::Descr(i));
        }
        self.by_episode = idx;
    }

    pub fn is_empty(&self) -> bool {
        self.evaluative.is_empty()
            && self.comparative.is_empty()
            && self.demonstrations.is_empty()
            && self.corrections.is_empty()
            && self.descriptive.is_empty()
    }

    pub fn n_instructive(&self) -> usize {
        self.demonstrations.len() + self.corrections.len()
    }

    pub(crate) fn items_for(&self, id: &EpisodeId) -> &[ItemRef] {
        self.by_episode.get(id).map_or(&[], Vec::as_slice)
    }
}

