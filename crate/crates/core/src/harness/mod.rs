//! Experiment commands shared by the command-line tool: search with final
//! training, fixed baselines, quantisation grid search, sweeps with Pareto
//! filtering, bitwidth statistics and checkpoint evaluation.

mod commands;
mod data;
mod grid;
mod stats;
mod sweep;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use commands::{cmd_baseline, cmd_eval, cmd_search, Baseline, BaselineModel, EvalReport, SearchRun};
pub use data::{cora_or_surrogate, open_dataset, DatasetOrigin, CORA_SURROGATE, DATA_ENV, TOY};
pub use grid::{cmd_gridsearch, GridOutcome, GridStep, MAX_DROP};
pub use stats::{cmd_stats, Histogram, StatsReport, SiteCategory};
pub use sweep::{cmd_sweep, pareto_frontier, run_sweep, write_points_csv, SweepGrid, SweepOutcome, SweepPoint};

use crate::error::{Error, Result};
use crate::graph::{LoadOptions, Metric};
use crate::nas::train::TrainConfig;
use crate::nas::SearchConfig;
use crate::supernet::NetworkSpec;

/// Final training after a search or for a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalTrain {
    pub epochs: usize,
    pub patience: usize,
}

impl Default for FinalTrain {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
        }
    }
}

/// Everything that determines one experiment besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layers: usize,
    pub channels: usize,
    pub search: SearchConfig,
    pub final_train: FinalTrain,
    pub load: LoadOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            channels: 32,
            search: SearchConfig::default(),
            final_train: FinalTrain::default(),
            load: LoadOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON or TOML (by `.toml` extension) file; missing fields keep
    /// their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let cfg: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 {
            return Err(Error::Argument("layers and channels must be positive".into()));
        }
        self.search.validate()?;
        self.train_config().validate()
    }

    /// Final-training settings: same learning rate, regularisation and seed
    /// as the search.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.final_train.epochs,
            patience: self.final_train.patience,
            lr: self.search.lr,
            weight_decay: self.search.weight_decay,
            dropout: self.search.dropout,
            seed: self.search.seed,
        }
    }
}

/// One row of results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub dataset: String,
    /// `search` or `baseline:<model>`.
    pub command: String,
    pub config: ExperimentConfig,
    pub spec: NetworkSpec,
    pub metric: Metric,
    pub test_metric: f64,
    pub val_metric: f64,
    pub model_bytes: f64,
    pub buffer_bytes: f64,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.test_metric) || !unit(self.val_metric) {
            return Err(Error::Contract(format!(
                "metrics outside [0, 1]: test {}, val {}",
                self.test_metric, self.val_metric
            )));
        }
        if !(self.model_bytes > 0.0) || !(self.buffer_bytes > 0.0) {
            return Err(Error::Contract("sizes must be positive".into()));
        }
        self.spec.validate()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Reads records from a file holding one record, a JSON array of records,
/// one record per line, or a sweep's `sweep.json` (failed points skipped).
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let parse = |s: &str| -> Result<Vec<ExperimentRecord>> {
        let trimmed = s.trim_start();
        if trimmed.starts_with('[') {
            return Ok(serde_json::from_str(trimmed)?);
        }
        if let Ok(r) = serde_json::from_str::<ExperimentRecord>(trimmed) {
            return Ok(vec![r]);
        }
        if let Ok(sweep) = serde_json::from_str::<SweepOutcome>(trimmed) {
            return Ok(sweep.points.into_iter().filter_map(|p| p.record).collect());
        }
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    };
    let records = parse(&text).map_err(|e| Error::ingest(path, e.to_string()))?;
    for r in &records {
        r.validate().map_err(|e| Error::ingest(path, e.to_string()))?;
    }
    Ok(records)
}
