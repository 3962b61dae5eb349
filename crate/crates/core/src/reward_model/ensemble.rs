//! Combining predictions of several reward models.

use serde::{Deserialize, Serialize};

use crate::gridworld::Cell;

use super::{RewardModel, RewardModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Weighted,
    /// Each model votes with the sign of its z-scored prediction; the result
    /// is the weighted mean prediction of the winning side.
    Voting,
}

fn check_weights(n_models: usize, weights: &[f64]) -> Result<(), RewardModelError> {
    if weights.len() != n_models {
        return Err(RewardModelError::LengthMismatch(weights.len(), n_models));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(RewardModelError::InvalidWeights("weights must be finite and non-negative".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(RewardModelError::InvalidWeights("weights must have a positive sum".into()));
    }
    Ok(())
}

fn weighted_mean(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (num, den) = values.fold((0.0, 0.0), |(n, d), (w, v)| (n + w * v, d + w));
    num / den
}

fn zscore(model: &RewardModel, cell: Cell) -> f64 {
    let all = model.predict_all();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        0.0
    } else {
        (model.predict_cell(cell) - mean) / sd
    }
}

/// Combined prediction for entering `cell`.
pub fn aggregate(
    models: &[RewardModel],
    weights: &[f64],
    mode: AggregationMode,
    cell: Cell,
) -> Result<f64, RewardModelError> {
    check_weights(models.len(), weights)?;
    let preds: Vec<f64> = models.iter().map(|m| m.predict_cell(cell)).collect();
    match mode {
        AggregationMode::Weighted => Ok(weighted_mean(weights.iter().copied().zip(preds))),
        AggregationMode::Voting => {
            let signs: Vec<f64> = models.iter().map(|m| zscore(m, cell).signum()).collect();
            let vote: f64 = weights.iter().zip(&signs).map(|(w, s)| w * s).sum();
            if vote == 0.0 {
                return Ok(weighted_mean(weights.iter().copied().zip(preds)));
            }
            let side = vote.signum();
            Ok(weighted_mean(
                weights
                    .iter()
                    .zip(&signs)
                    .zip(&preds)
                    .filter(|((_, s), _)| **s == side)
                    .map(|((w, _), p)| (*w, *p)),
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<RewardModel>,
    weights: Vec<f64>,
    mode: AggregationMode,
}

impl Ensemble {
    pub fn new(members: Vec<RewardModel>, weights: Vec<f64>, mode: AggregationMode) -> Result<Self, RewardModelError> {
        check_weights(members.len(), &weights)?;
        Ok(Ensemble { members, weights, mode })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[RewardModel] {
        &self.members
    }

    pub fn predict_cell(&self, cell: Cell) -> f64 {
        aggregate(&self.members, &self.weights, self.mode, cell).expect("weights checked at construction")
    }

    /// Weighted variance across members of the mean per-step predicted reward
    /// over `cells`.
    pub fn disagreement(&self, cells: &[Cell]) -> f64 {
        if cells.is_empty() {
            return 0.0;
        }
        let means: Vec<f64> = self
            .members
            .iter()
            .map(|m| m.segment_return(cells) / cells.len() as f64)
            .collect();
        let mu = weighted_mean(self.weights.iter().copied().zip(means.iter().copied()));
        weighted_mean(self.weights.iter().copied().zip(means.iter().map(|m| (m - mu).powi(2))))
    }
}
