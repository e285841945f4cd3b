//! Grouped longitudinal data: observation types, CSV ingestion, within-group
//! temporal splits, z-normalization and synthetic generators with known
//! ground truth.

mod csv_io;
mod normalize;
mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NmeError, Result};

pub use csv_io::{load_csv, CsvSchema, CsvTask};
pub use normalize::{znormalize, NormStats};
pub use split::{filter_min_observations, split_within_group, take_group_fraction, SplitFractions};

/// Key identifying the group (person, genre, outlet) an observation belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupId(String);

impl GroupId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(NmeError::invalid("group id must be non-empty"));
        }
        Ok(GroupId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for GroupId {
    type Error = NmeError;

    fn try_from(value: String) -> Result<Self> {
        GroupId::new(value)
    }
}

impl From<GroupId> for String {
    fn from(g: GroupId) -> String {
        g.0
    }
}

/// Panics on the empty string; intended for literals.
impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId::new(s).expect("group id must be non-empty")
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A label: real value for regression, class index for classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Real(f64),
    Class(usize),
}

impl Target {
    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Target::Real(v) => Some(v),
            Target::Class(_) => None,
        }
    }

    pub fn as_class(&self) -> Option<usize> {
        match *self {
            Target::Class(k) => Some(k),
            Target::Real(_) => None,
        }
    }

    /// Numeric view used by metrics (class indices become integral reals).
    pub fn value(&self) -> f64 {
        match *self {
            Target::Real(v) => v,
            Target::Class(k) => k as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub group: GroupId,
    pub t: i64,
    pub features: Vec<f64>,
    pub label: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub features: Vec<f64>,
    pub state: usize,
}

/// One labelled state sequence. `t` orders sequences within a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceObservation {
    pub group: GroupId,
    pub sequence_id: String,
    pub t: i64,
    pub steps: Vec<Step>,
}

impl SequenceObservation {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.state).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Multiclass { classes: usize },
    Sequence { states: usize },
}

impl TaskKind {
    /// Number of classes or states; `None` for regression.
    pub fn classes(&self) -> Option<usize> {
        match *self {
            TaskKind::Regression => None,
            TaskKind::Multiclass { classes } => Some(classes),
            TaskKind::Sequence { states } => Some(states),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Records {
    Points(Vec<Observation>),
    Sequences(Vec<SequenceObservation>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    task: TaskKind,
    feature_dim: usize,
    records: Records,
}

impl Dataset {
    /// Builds a point dataset, checking feature dimensions and label kinds.
    pub fn from_observations(task: TaskKind, feature_dim: usize, observations: Vec<Observation>) -> Result<Self> {
        for (i, obs) in observations.iter().enumerate() {
            if obs.features.len() != feature_dim {
                return Err(NmeError::InvalidDataset(format!(
                    "observation {i} has {} features, expected {feature_dim}",
                    obs.features.len()
                )));
            }
            match (task, obs.label) {
                (TaskKind::Regression, Target::Real(_)) => {}
                (TaskKind::Multiclass { classes }, Target::Class(k)) if k < classes => {}
                (TaskKind::Multiclass { classes }, Target::Class(k)) => {
                    return Err(NmeError::InvalidDataset(format!(
                        "observation {i} has class {k}, expected < {classes}"
                    )))
                }
                (TaskKind::Sequence { .. }, _) => {
                    return Err(NmeError::InvalidDataset(
                        "sequence task requires sequence records".into(),
                    ))
                }
                _ => {
                    return Err(NmeError::InvalidDataset(format!(
                        "observation {i} label does not match task kind"
                    )))
                }
            }
        }
        Ok(Dataset {
            task,
            feature_dim,
            records: Records::Points(observations),
        })
    }

    pub fn from_sequences(states: usize, feature_dim: usize, sequences: Vec<SequenceObservation>) -> Result<Self> {
        if states < 2 {
            return Err(NmeError::InvalidDataset("sequence task needs at least 2 states".into()));
        }
        for seq in &sequences {
            if seq.steps.is_empty() {
                return Err(NmeError::InvalidDataset(format!(
                    "sequence {} of group {} is empty",
                    seq.sequence_id, seq.group
                )));
            }
            for step in &seq.steps {
                if step.features.len() != feature_dim {
                    return Err(NmeError::InvalidDataset(format!(
                        "sequence {} has a step with {} features, expected {feature_dim}",
                        seq.sequence_id,
                        step.features.len()
                    )));
                }
                if step.state >= states {
                    return Err(NmeError::InvalidDataset(format!(
                        "sequence {} has state {}, expected < {states}",
                        seq.sequence_id, step.state
                    )));
                }
            }
        }
        Ok(Dataset {
            task: TaskKind::Sequence { states },
            feature_dim,
            records: Records::Sequences(sequences),
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn records(&self) -> &Records {
        &self.records
    }

    pub fn observations(&self) -> &[Observation] {
        match &self.records {
            Records::Points(o) => o,
            Records::Sequences(_) => &[],
        }
    }

    pub fn sequences(&self) -> &[SequenceObservation] {
        match &self.records {
            Records::Sequences(s) => s,
            Records::Points(_) => &[],
        }
    }

    /// Number of records (observations or whole sequences).
    pub fn len(&self) -> usize {
        match &self.records {
            Records::Points(o) => o.len(),
            Records::Sequences(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self.records, Records::Sequences(_))
    }

    /// Observation counts per group. Sequence steps count individually.
    pub fn group_counts(&self) -> BTreeMap<GroupId, usize> {
        let mut counts = BTreeMap::new();
        match &self.records {
            Records::Points(obs) => {
                for o in obs {
                    *counts.entry(o.group.clone()).or_insert(0) += 1;
                }
            }
            Records::Sequences(seqs) => {
                for s in seqs {
                    *counts.entry(s.group.clone()).or_insert(0) += s.steps.len();
                }
            }
        }
        counts
    }

    /// Sorted list of distinct groups.
    pub fn groups(&self) -> Vec<GroupId> {
        self.group_counts().into_keys().collect()
    }

    /// Mean label per group (regression only).
    pub fn group_label_means(&self) -> BTreeMap<GroupId, f64> {
        let mut acc: BTreeMap<GroupId, (f64, usize)> = BTreeMap::new();
        for o in self.observations() {
            if let Target::Real(y) = o.label {
                let e = acc.entry(o.group.clone()).or_insert((0.0, 0));
                e.0 += y;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
    }

    pub(crate) fn with_records(&self, records: Records) -> Dataset {
        Dataset {
            task: self.task,
            feature_dim: self.feature_dim,
            records,
        }
    }

    /// Keeps only the records whose group satisfies `keep`.
    pub fn retain_groups(&self, keep: impl Fn(&GroupId) -> bool) -> Dataset {
        let records = match &self.records {
            Records::Points(o) => Records::Points(o.iter().filter(|x| keep(&x.group)).cloned().collect()),
            Records::Sequences(s) => Records::Sequences(s.iter().filter(|x| keep(&x.group)).cloned().collect()),
        };
        self.with_records(records)
    }
}
