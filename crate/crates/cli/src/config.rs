//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use nme_core::dataset::synth::{
    synth_crf, synth_linear_mixed, synth_nonlinear_mixed, CrfSynthSpec, LinearSynthSpec, NonlinearSynthSpec,
};
use nme_core::dataset::{load_csv, CsvSchema, CsvTask, Dataset, SplitFractions, TaskKind};
use nme_core::lme::LmeOptions;
use nme_core::metrics::{MetricKind, MIN_GROUP_OBSERVATIONS};
use nme_core::mlp::Placement;
use nme_core::trainer::{GridSpec, ModelKind, ModelSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A synthetic generator and its settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum SynthSpec {
    Linear(LinearSynthSpec),
    Nonlinear(NonlinearSynthSpec),
    Crf(CrfSynthSpec),
}

impl SynthSpec {
    /// Generates the dataset and its ground truth as JSON.
    pub fn generate(&self) -> CliResult<(Dataset, serde_json::Value)> {
        let to_json = |v: serde_json::Result<serde_json::Value>| v.map_err(|e| CliError::Io(e.to_string()));
        Ok(match self {
            SynthSpec::Linear(s) => {
                let (ds, truth) = synth_linear_mixed(s).map_err(|e| CliError::at("dataset.spec", e))?;
                (ds, to_json(serde_json::to_value(truth))?)
            }
            SynthSpec::Nonlinear(s) => {
                let (ds, truth) = synth_nonlinear_mixed(s).map_err(|e| CliError::at("dataset.spec", e))?;
                (ds, to_json(serde_json::to_value(truth))?)
            }
            SynthSpec::Crf(s) => {
                let (ds, truth) = synth_crf(s).map_err(|e| CliError::at("dataset.spec", e))?;
                (ds, to_json(serde_json::to_value(truth))?)
            }
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            SynthSpec::Linear(s) => s.common.seed = seed,
            SynthSpec::Nonlinear(s) => s.common.seed = seed,
            SynthSpec::Crf(s) => s.seed = seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Synth { spec: SynthSpec },
}

impl DatasetSource {
    /// Relative CSV paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> CliResult<Dataset> {
        match self {
            DatasetSource::Csv { path, schema } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                load_csv(&full, schema).map_err(|e| CliError::at("dataset.path", e))
            }
            DatasetSource::Synth { spec } => Ok(spec.generate()?.0),
        }
    }

    fn declares_classes(&self) -> bool {
        match self {
            DatasetSource::Csv { schema, .. } => matches!(schema.task, CsvTask::Classification { .. }),
            DatasetSource::Synth { spec } => matches!(spec, SynthSpec::Crf(_)),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_min_observations() -> usize {
    MIN_GROUP_OBSERVATIONS
}

fn default_fractions() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 1.0]
}

fn default_resamples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Reporting metric; also drives validation-based model selection.
    pub metric: MetricKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitFractions,
    /// Groups with fewer observations are dropped before splitting.
    #[serde(default = "default_min_observations")]
    pub min_observations: usize,
    /// Groups with fewer test observations are left out of the test report.
    #[serde(default = "default_min_observations")]
    pub test_min_observations: usize,
    #[serde(default)]
    pub lme: LmeOptions,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

/// Parses JSON, reporting the path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_json(&text)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate_static()?;
        Ok(cfg)
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.name, self.train.seed)
    }

    /// Applies command-line overrides and copies the metric into the
    /// training config.
    pub fn resolve(mut self, seed: Option<u64>, deterministic: bool, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if deterministic {
            self.train.deterministic = true;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self.train.metric = self.metric;
        self
    }

    /// Checks that need no data.
    pub fn validate_static(&self) -> CliResult<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(CliError::config(format!(
                "name: {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.name
            )));
        }
        if self.model.placement == Placement::LastAndTransitions && self.model.kind != ModelKind::Crf {
            return Err(CliError::config("model.placement: last+T is only valid for model crf"));
        }
        if self.model.kind == ModelKind::MlpLme && self.metric.is_classification() {
            return Err(CliError::config("metric: model mlp_lme supports regression metrics only"));
        }
        if self.metric.is_classification() != (self.dataset.declares_classes() || self.model.kind == ModelKind::Crf) {
            return Err(CliError::config(format!(
                "metric: {} does not match the task of the dataset",
                self.metric.name()
            )));
        }
        self.train.validate().map_err(|e| CliError::at("train", e))?;
        if self.bootstrap_resamples == 0 {
            return Err(CliError::config("bootstrap_resamples: must be >= 1"));
        }
        Ok(())
    }

    /// Checks against the loaded dataset.
    pub fn validate_for(&self, task: TaskKind) -> CliResult<()> {
        self.model.validate(task).map_err(|e| CliError::at("model", e))?;
        let classification = !matches!(task, TaskKind::Regression);
        if self.metric.is_classification() != classification {
            return Err(CliError::config(format!(
                "metric: {} is not defined for this dataset's task",
                self.metric.name()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "name": "demo",
            "dataset": {"source": "synth", "spec": {
                "generator": "linear",
                "common": {"groups": 4, "observations": {"fixed": 20}, "feature_dim": 2, "noise_std": 0.3, "seed": 1},
                "slopes": [1.0, -1.0], "intercept": 0.0, "slope_variances": [0.0, 0.0], "intercept_variance": 1.0
            }},
            "model": {"kind": "mlp", "hidden": [4], "placement": "last"},
            "metric": "nrmse"
        })
    }

    fn parse(v: serde_json::Value) -> CliResult<ExperimentConfig> {
        let cfg: ExperimentConfig = parse_json(&v.to_string())?;
        cfg.validate_static()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(base()).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.min_observations, 10);
        assert_eq!(cfg.run_id(), "demo-s0");
        assert_eq!(cfg.resolve(Some(7), true, None).train.seed, 7);
    }

    #[test]
    fn last_t_needs_crf() {
        let mut v = base();
        v["model"]["placement"] = "last+T".into();
        let err = parse(v).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("model.placement"), "{err}");
    }

    #[test]
    fn metric_must_match_task() {
        let mut v = base();
        v["metric"] = "krippendorff_alpha".into();
        assert!(parse(v).unwrap_err().to_string().contains("metric"));
    }

    #[test]
    fn parse_errors_name_the_field() {
        let mut v = base();
        v["train"] = serde_json::json!({"learning_rate": "fast"});
        let err = parse(v).unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        let mut v = base();
        v["unexpected"] = 1.into();
        assert_eq!(parse(v).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn invalid_train_values_are_config_errors() {
        let mut v = base();
        v["train"] = serde_json::json!({"learning_rate": 0.0});
        let err = parse(v).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
