//! The JSON run record written by `train` and `gridsearch`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nme_core::dataset::{Dataset, GroupId, NormStats, TaskKind};
use nme_core::lme::LmeHead;
use nme_core::metrics::EvalReport;
use nme_core::trainer::{BuiltModel, FitResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{read_json, ExperimentConfig};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub task: TaskKind,
    pub feature_dim: usize,
    /// SHA-256 of the filtered dataset.
    pub fingerprint: String,
    /// SHA-256 of the test split.
    pub test_fingerprint: String,
    /// Observations (steps for sequences) per group and split.
    pub train_counts: BTreeMap<GroupId, usize>,
    pub val_counts: BTreeMap<GroupId, usize>,
    pub test_counts: BTreeMap<GroupId, usize>,
    /// Mean training label per group, after normalization.
    pub train_label_means: BTreeMap<GroupId, f64>,
}

impl DataSummary {
    pub fn new(all: &Dataset, train: &Dataset, val: &Dataset, test: &Dataset) -> CliResult<Self> {
        Ok(DataSummary {
            task: all.task(),
            feature_dim: all.feature_dim(),
            fingerprint: fingerprint(all)?,
            test_fingerprint: fingerprint(test)?,
            train_counts: train.group_counts(),
            val_counts: val.group_counts(),
            test_counts: test.group_counts(),
            train_label_means: train.group_label_means(),
        })
    }
}

pub fn fingerprint(ds: &Dataset) -> CliResult<String> {
    let bytes = serde_json::to_vec(ds).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Wall-clock creation time; the only field that differs between
    /// reruns of the same config and seed.
    pub created_at: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub data: DataSummary,
    pub normalization: NormStats,
    pub model: BuiltModel,
    /// Traces and the best-epoch snapshot.
    pub fit: FitResult,
    pub lme_head: Option<LmeHead>,
    pub test: EvalReport,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Io(format!("{}: no such file", path.display())));
        }
        read_json(path)
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> CliResult<std::path::PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.run.json", self.run_id));
        fs::write(&path, self.to_json()?)?;
        Ok(path)
    }

    /// The record as JSON with the timestamp removed, for reproducibility checks.
    pub fn without_timestamp(&self) -> CliResult<serde_json::Value> {
        let mut v = serde_json::to_value(self).map_err(|e| CliError::Io(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("created_at");
        }
        Ok(v)
    }
}
