//! Offline computations behind the `beta-report`, `model-eval` and
//! `consistency` subcommands.

use std::fs;
use std::path::Path;

use feedback_core::analysis::{
    beta_report, choice_observations, consistency_table, counts_by_kind, evaluate_reward, BetaReport,
    ConsistencyRow,
};
use feedback_core::gridworld::GridSpec;
use feedback_core::rationality::FitOptions;
use feedback_core::reward_model::RewardModel;

use crate::error::{io_err, CliError};
use crate::inputs::{sha256_hex, ExperimentInputs};
use crate::report::{AnalysisReport, ModelSection, Provenance};

/// Which records count as calibration data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalibrationFilter {
    /// The configured calibration source.
    Configured,
    /// Records referring to episodes of this `source_kind`.
    Source(String),
    /// Every record; ground truth is known for all gridworld episodes.
    All,
}

pub fn provenance(inp: &ExperimentInputs) -> Provenance {
    Provenance {
        experiment_id: inp.config.experiment_id.clone(),
        log_sha256: sha256_hex(&inp.log_bytes),
        log_bytes: inp.log_bytes.len() as u64,
        log_records: inp.records.len(),
        config_sha256: sha256_hex(&inp.config_bytes),
        buffer_episodes: inp.episodes.len(),
    }
}

/// Per-slice β fits and their uniform decomposition from calibration choices.
pub fn cmd_beta_report(
    inp: &ExperimentInputs,
    filter: &CalibrationFilter,
    opts: &FitOptions,
) -> Result<BetaReport, CliError> {
    let source = match filter {
        CalibrationFilter::Configured => Some(inp.calibration_source()),
        CalibrationFilter::Source(s) => Some(s.as_str()),
        CalibrationFilter::All => None,
    };
    let obs = choice_observations(&inp.records, &inp.episodes, &inp.spec, &inp.values, source)?;
    Ok(beta_report(&obs, opts)?)
}

/// Ground-truth evaluation of a stored checkpoint.
pub fn cmd_model_eval(spec: &GridSpec, snapshot: &str, checkpoint: &Path) -> Result<ModelSection, CliError> {
    let bytes = fs::read(checkpoint).map_err(io_err(checkpoint))?;
    let model = RewardModel::from_checkpoint(&bytes, spec)?;
    Ok(ModelSection {
        snapshot: snapshot.to_string(),
        checkpoint_sha256: sha256_hex(&bytes),
        eval: evaluate_reward(spec, |c| model.predict_cell(c)),
    })
}

pub fn cmd_consistency(inp: &ExperimentInputs) -> Vec<ConsistencyRow> {
    consistency_table(&inp.records)
}

/// Every section that the inputs support. Missing calibration data or
/// snapshots leave their sections out instead of failing.
pub fn cmd_report(
    inp: &ExperimentInputs,
    filter: &CalibrationFilter,
    opts: &FitOptions,
) -> Result<AnalysisReport, CliError> {
    let mut r = AnalysisReport::new(provenance(inp));
    r.beta = match cmd_beta_report(inp, filter, opts) {
        Ok(b) => Some(b),
        Err(CliError::NoCalibrationData) => None,
        Err(e) => return Err(e),
    };
    r.counts = Some(counts_by_kind(&inp.records));
    r.consistency = Some(cmd_consistency(inp));
    r.model = match inp.snapshot_checkpoint(None) {
        Ok((id, path)) => Some(cmd_model_eval(&inp.spec, &id, &path)?),
        Err(CliError::NotFound(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(r)
}
