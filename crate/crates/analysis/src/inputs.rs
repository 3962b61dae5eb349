//! Loads an experiment directory as written by the feedback service, without
//! taking its locks.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use feedback_core::config::ExperimentConfig;
use feedback_core::encoding::{parse_feedback, EpisodeId, StandardizedFeedback};
use feedback_core::gridworld::{value_iteration, EpisodeRecord, GridSpec, ValueTable};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};

/// Calibration `source_kind` assumed when the config names none; matches the
/// service's quality estimates.
pub const DEFAULT_CALIBRATION_SOURCE: &str = "calibration";
/// Tolerance of the ground-truth value iteration; matches the service.
pub const PLAN_TOL: f64 = 1e-9;

/// Where the pieces of an experiment live. Unset paths default to the
/// service's layout under `dir`.
#[derive(Debug, Clone, Default)]
pub struct InputPaths {
    pub dir: PathBuf,
    pub config: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub buffer: Option<PathBuf>,
}

impl InputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        InputPaths {
            dir: dir.into(),
            ..Default::default()
        }
    }
}

pub struct ExperimentInputs {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub config_bytes: Vec<u8>,
    /// The log up to its last complete line.
    pub log_bytes: Vec<u8>,
    pub records: Vec<StandardizedFeedback>,
    pub episodes: HashMap<EpisodeId, EpisodeRecord>,
    pub spec: GridSpec,
    pub values: ValueTable,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

/// Parses complete lines only; a torn final line is ignored, as the service
/// does on reopen.
pub fn parse_log(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Vec<StandardizedFeedback>), CliError> {
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let text = std::str::from_utf8(&bytes[..end]).map_err(|e| CliError::BadInput {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            parse_feedback(l).map_err(|source| CliError::Log {
                path: path.into(),
                line: i + 1,
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok((bytes[..end].to_vec(), records))
}

impl ExperimentInputs {
    pub fn load(paths: &InputPaths) -> Result<Self, CliError> {
        let dir = paths.dir.clone();
        let config_path = paths.config.clone().unwrap_or_else(|| dir.join("config.json"));
        let config_bytes = read(&config_path)?;
        let config: ExperimentConfig =
            serde_json::from_slice(&config_bytes).map_err(|e| CliError::BadInput {
                path: config_path.clone(),
                reason: e.to_string(),
            })?;
        let log_path = paths.log.clone().unwrap_or_else(|| dir.join("feedback.log"));
        let raw = match fs::read(&log_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&log_path)(e)),
        };
        let (log_bytes, records) = parse_log(&log_path, &raw)?;
        let buffer = paths
            .buffer
            .clone()
            .or_else(|| config.buffer_path.clone())
            .unwrap_or_else(|| dir.join("buffer"));
        let episodes = feedback_core::buffer::read_episodes(&buffer)?;
        let spec = config.grid_spec()?;
        let values = value_iteration(&spec, PLAN_TOL);
        Ok(ExperimentInputs {
            dir,
            config,
            config_bytes,
            log_bytes,
            records,
            episodes,
            spec,
            values,
        })
    }

    pub fn calibration_source(&self) -> &str {
        self.config
            .calibration
            .as_ref()
            .map_or(DEFAULT_CALIBRATION_SOURCE, |c| c.source_kind.as_str())
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.dir.join("snapshots")
    }

    /// Checkpoint of the named snapshot, or of the newest one.
    pub fn snapshot_checkpoint(&self, snapshot: Option<&str>) -> Result<(String, PathBuf), CliError> {
        let dir = self.snapshot_dir();
        let id = match snapshot {
            Some(id) => id.to_string(),
            None => {
                let mut ids: Vec<String> = match fs::read_dir(&dir) {
                    Ok(rd) => rd
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                        .collect(),
                    Err(_) => Vec::new(),
                };
                ids.sort();
                ids.pop().ok_or_else(|| CliError::NotFound(format!("snapshot in {}", dir.display())))?
            }
        };
        let path = dir.join(format!("{id}.ckpt"));
        if !path.is_file() {
            return Err(CliError::NotFound(format!("snapshot {id}")));
        }
        Ok((id, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped() {
        let p = Path::new("x.log");
        let (bytes, recs) = parse_log(p, b"").unwrap();
        assert!(bytes.is_empty() && recs.is_empty());
        let (bytes, recs) = parse_log(p, b"{\"v\":1,\"feed").unwrap();
        assert!(bytes.is_empty() && recs.is_empty());
        assert!(matches!(
            parse_log(p, b"garbage\n"),
            Err(CliError::Log { line: 1, .. })
        ));
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
