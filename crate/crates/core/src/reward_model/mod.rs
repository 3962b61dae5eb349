//! State-reward models trained from encoded feedback.
//!
//! Every loss is a function of the per-cell predictions `r(c)`, so each loss
//! produces `∂L/∂r(c)` for all cells and the model back-propagates that once
//! per evaluation ([`RewardModel::backprop`]).
//!
//! A step's reward-bearing state is the cell it enters: for a segment
//! `[start, end)` of an episode the predicted return is
//! `Σ_{t=start}^{end-1} r(states[t+1])`, mirroring the ground-truth reward.

mod dataset;
mod ensemble;
mod losses;
mod train;

pub use dataset::{
    target_cells, CellWeights, DatasetOptions, DemoItem, DescrItem, EvalItem, PairItem,
    PreparedDataset,
};
pub use ensemble::{aggregate, AggregationMode, Ensemble};
pub use losses::{
    loss_comparative, loss_descriptive, loss_evaluative, loss_instructive, per_episode_loss,
    EpisodeLoss, LossGrad, ModelScorer,
};
pub use train::{train, LossWeights, TrainLogEntry, TrainOptions};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::BufferError;
use crate::gridworld::{Action, Cell, GridSpec, Observation, Tile};
use crate::translator::TranslateError;

#[derive(Debug, Error)]
pub enum RewardModelError {
    #[error("record {feedback_id} has the wrong kind for this loss: {reason}")]
    WrongKind { feedback_id: u64, reason: String },
    #[error("no usable training data for the enabled loss terms")]
    EmptyDataset,
    #[error("all loss weights are zero")]
    NoActiveWeights,
    #[error("{0} weights for {1} models")]
    LengthMismatch(usize, usize),
    #[error("invalid aggregation weights: {0}")]
    InvalidWeights(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Translate(#[from] TranslateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    OnehotCell,
    CellPlusLocalWindow { radius: u32 },
}

/// Precomputed feature vectors for every cell of one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    kind: FeatureKind,
    width: i32,
    height: i32,
    layout: u64,
    dimension: usize,
    table: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, spec: &GridSpec) -> Self {
        let n = spec.n_cells();
        let (dimension, table) = match kind {
            FeatureKind::OnehotCell => {
                let table = (0..n)
                    .map(|i| {
                        let mut v = vec![0.0; n];
                        v[i] = 1.0;
                        v
                    })
                    .collect();
                (n, table)
            }
            FeatureKind::CellPlusLocalWindow { radius } => {
                let r = radius as i32;
                let side = (2 * r + 1) as usize;
                let dim = n + 3 * side * side;
                let table = spec
                    .cells()
                    .enumerate()
                    .map(|(i, c)| {
                        let mut v = vec![0.0; dim];
                        v[i] = 1.0;
                        let mut k = n;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let t = spec.tile(Cell::new(c.x + dx, c.y + dy));
                                v[k] = f64::from(u8::from(t == Tile::Wall));
                                v[k + 1] = f64::from(u8::from(t == Tile::Lava));
                                v[k + 2] = f64::from(u8::from(t == Tile::Goal));
                                k += 3;
                            }
                        }
                        v
                    })
                    .collect();
                (dim, table)
            }
        };
        FeatureMap {
            kind,
            width: spec.width,
            height: spec.height,
            layout: spec.layout_hash(),
            dimension,
            table,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn n_cells(&self) -> usize {
        self.table.len()
    }

    pub fn cell_index(&self, c: Cell) -> Option<usize> {
        (c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height)
            .then(|| (c.y * self.width + c.x) as usize)
    }

    pub fn cell_at(&self, i: usize) -> Cell {
        Cell::new(i as i32 % self.width, i as i32 / self.width)
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.table[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    features: FeatureMap,
    kind: ModelKind,
    params: Vec<f64>,
    pub l2_coef: f64,
    pub training_log: Vec<TrainLogEntry>,
}

impl RewardModel {
    /// Linear model with all-zero weights.
    pub fn linear(features: FeatureMap) -> Self {
        let d = features.dimension();
        RewardModel {
            features,
            kind: ModelKind::Linear,
            params: vec![0.0; d],
            l2_coef: 0.0,
            training_log: Vec::new(),
        }
    }

    /// One-hidden-layer tanh network with small seeded random weights.
    pub fn mlp(features: FeatureMap, hidden: usize, seed: u64) -> Self {
        let d = features.dimension();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (1.0 / d as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let mut params = Vec::with_capacity(d * hidden + 2 * hidden + 1);
        params.extend((0..d * hidden).map(|_| rng.random_range(-s1..s1)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend((0..hidden).map(|_| rng.random_range(-s2..s2)));
        params.push(0.0);
        RewardModel {
            features,
            kind: ModelKind::Mlp { hidden },
            params,
            l2_coef: 0.0,
            training_log: Vec::new(),
        }
    }

    pub fn new(features: FeatureMap, kind: ModelKind, seed: u64) -> Self {
        match kind {
            ModelKind::Linear => Self::linear(features),
            ModelKind::Mlp { hidden } => Self::mlp(features, hidden, seed),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_cells(&self) -> usize {
        self.features.n_cells()
    }

    fn predict_index(&self, i: usize) -> f64 {
        let phi = self.features.features(i);
        match self.kind {
            ModelKind::Linear => dot(&self.params, phi),
            ModelKind::Mlp { hidden } => {
                let d = self.features.dimension();
                let (w1, rest) = self.params.split_at(d * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut out = b2[0];
                for j in 0..hidden {
                    let z = b1[j] + dot(&w1[j * d..(j + 1) * d], phi);
                    out += w2[j] * z.tanh();
                }
                out
            }
        }
    }

    /// Predicted reward for entering `cell`. Out-of-grid cells predict 0.
    pub fn predict_cell(&self, cell: Cell) -> f64 {
        self.features
            .cell_index(cell)
            .map_or(0.0, |i| self.predict_index(i))
    }

    pub fn predict(&self, state: &Observation) -> f64 {
        self.predict_cell(state.cell)
    }

    /// Predictions for every cell, indexed row-major.
    pub fn predict_all(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|i| self.predict_index(i)).collect()
    }

    /// Predicted return of a sequence of entered cells.
    pub fn segment_return(&self, cells: &[Cell]) -> f64 {
        cells.iter().map(|&c| self.predict_cell(c)).sum()
    }

    /// Chain rule from per-cell loss gradients to parameter gradients.
    pub fn backprop(&self, cell_grads: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        match self.kind {
            ModelKind::Linear => {
                for (i, &g) in cell_grads.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, self.features.features(i), &mut grad);
                    }
                }
            }
            ModelKind::Mlp { hidden } => {
                let d = self.features.dimension();
                let (w1, rest) = self.params.split_at(d * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let w2 = &rest[..hidden];
                for (i, &g) in cell_grads.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let phi = self.features.features(i);
                    for j in 0..hidden {
                        let a = (b1[j] + dot(&w1[j * d..(j + 1) * d], phi)).tanh();
                        let back = g * w2[j] * (1.0 - a * a);
                        axpy(back, phi, &mut grad[j * d..(j + 1) * d]);
                        grad[d * hidden + j] += back;
                        grad[d * hidden + hidden + j] += g * a;
                    }
                    grad[d * hidden + 2 * hidden] += g;
                }
            }
        }
        grad
    }

    /// Greedy policy and values from planning on the learned reward.
    pub fn plan(&self, spec: &GridSpec, tol: f64) -> crate::gridworld::ValueTable {
        crate::gridworld::value_iteration_with(spec, |c| self.predict_cell(c), tol)
    }

    pub fn greedy_action(&self, spec: &GridSpec, cell: Cell) -> Action {
        self.plan(spec, 1e-9).greedy(cell)
    }

    /// Serializes parameters in the flat checkpoint format:
    ///
    /// ```text
    /// magic "RWDM" | version u32 | model u8 | features u8 | reserved u16
    /// | radius u32 | width u32 | height u32 | hidden u32 | layout u64
    /// | l2_coef f64 | n_params u64 | params f64 × n_params
    /// ```
    ///
    /// All fields little-endian.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let (model, hidden) = match self.kind {
            ModelKind::Linear => (0u8, 0u32),
            ModelKind::Mlp { hidden } => (1, hidden as u32),
        };
        let (feat, radius) = match self.features.kind {
            FeatureKind::OnehotCell => (0u8, 0u32),
            FeatureKind::CellPlusLocalWindow { radius } => (1, radius),
        };
        out.push(model);
        out.push(feat);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&radius.to_le_bytes());
        out.extend_from_slice(&(self.features.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.features.height as u32).to_le_bytes());
        out.extend_from_slice(&hidden.to_le_bytes());
        out.extend_from_slice(&self.features.layout.to_le_bytes());
        out.extend_from_slice(&self.l2_coef.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Restores a checkpoint for the grid it was trained on.
    pub fn from_checkpoint(bytes: &[u8], spec: &GridSpec) -> Result<Self, RewardModelError> {
        let err = |m: &str| RewardModelError::Checkpoint(m.to_string());
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| err("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32().ok_or_else(|| err("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let head = r.take(4).ok_or_else(|| err("truncated header"))?;
        let (model, feat) = (head[0], head[1]);
        let radius = r.u32().ok_or_else(|| err("truncated header"))?;
        let width = r.u32().ok_or_else(|| err("truncated header"))?;
        let height = r.u32().ok_or_else(|| err("truncated header"))?;
        let hidden = r.u32().ok_or_else(|| err("truncated header"))? as usize;
        let layout = r.u64().ok_or_else(|| err("truncated header"))?;
        let l2_coef = f64::from_bits(r.u64().ok_or_else(|| err("truncated header"))?);
        let n = r.u64().ok_or_else(|| err("truncated header"))? as usize;
        if width as i32 != spec.width || height as i32 != spec.height || layout != spec.layout_hash() {
            return Err(err("checkpoint was trained on a different grid"));
        }
        let fkind = match feat {
            0 => FeatureKind::OnehotCell,
            1 => FeatureKind::CellPlusLocalWindow { radius },
            k => return Err(err(&format!("unknown feature kind {k}"))),
        };
        let kind = match model {
            0 => ModelKind::Linear,
            1 => ModelKind::Mlp { hidden },
            k => return Err(err(&format!("unknown model kind {k}"))),
        };
        let mut m = RewardModel::new(FeatureMap::new(fkind, spec), kind, 0);
        if m.params.len() != n {
            return Err(err(&format!("expected {} parameters, header says {n}", m.params.len())));
        }
        for p in m.params.iter_mut() {
            *p = f64::from_bits(r.u64().ok_or_else(|| err("truncated parameters"))?);
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        m.l2_coef = l2_coef;
        Ok(m)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RWDM";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_predicts_zero() {
        let spec = GridSpec::default_8x8();
        let m = RewardModel::linear(FeatureMap::new(FeatureKind::OnehotCell, &spec));
        assert!(spec.cells().all(|c| m.predict_cell(c) == 0.0));
    }

    #[test]
    fn onehot_goal_weight_lights_only_goal() {
        let spec = GridSpec::default_8x8();
        let mut m = RewardModel::linear(FeatureMap::new(FeatureKind::OnehotCell, &spec));
        m.params_mut()[spec.cell_index(spec.goal)] = 1.0;
        for c in spec.cells() {
            let want = if c == spec.goal { 1.0 } else { 0.0 };
            assert_eq!(m.predict_cell(c), want);
        }
    }

    #[test]
    fn parameter_counts() {
        let spec = GridSpec::default_8x8();
        let fm = FeatureMap::new(FeatureKind::OnehotCell, &spec);
        assert_eq!(RewardModel::linear(fm.clone()).n_params(), 64);
        assert_eq!(RewardModel::mlp(fm, 32, 1).n_params(), 64 * 32 + 2 * 32 + 1);
        let win = FeatureMap::new(FeatureKind::CellPlusLocalWindow { radius: 1 }, &spec);
        assert_eq!(win.dimension(), 64 + 27);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = GridSpec::default_8x8();
        let fm = FeatureMap::new(FeatureKind::CellPlusLocalWindow { radius: 1 }, &spec);
        let mut m = RewardModel::mlp(fm, 8, 3);
        m.l2_coef = 0.25;
        let bytes = m.to_checkpoint();
        let back = RewardModel::from_checkpoint(&bytes, &spec).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.kind(), m.kind());
        assert_eq!(back.l2_coef, 0.25);
        assert!(RewardModel::from_checkpoint(&bytes[..bytes.len() - 1], &spec).is_err());
        let other = GridSpec::empty(8, 8, Cell::new(0, 0), Cell::new(7, 7)).unwrap();
        assert!(RewardModel::from_checkpoint(&bytes, &other).is_err());
    }
}
