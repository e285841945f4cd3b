use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Observation, SequenceObservation, Step, Target, TaskKind};
use crate::error::{NmeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CsvTask {
    Regression,
    /// `classes: None` infers K as the largest label plus one.
    Classification { classes: Option<usize> },
}

/// Column names of the reserved CSV columns. Every other column is a
/// numeric feature, taken in header order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub group: String,
    pub time: String,
    pub label: String,
    /// Only used when the header contains it; turns the file into sequences.
    pub sequence: String,
    pub task: CsvTask,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            group: "group".into(),
            time: "t".into(),
            label: "label".into(),
            sequence: "sequence".into(),
            task: CsvTask::Regression,
        }
    }
}

impl CsvSchema {
    pub fn classification(classes: Option<usize>) -> Self {
        CsvSchema {
            task: CsvTask::Classification { classes },
            ..Default::default()
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    read_csv(reader, schema)
}

pub(crate) fn read_csv<R: std::io::Read>(mut reader: csv::Reader<R>, schema: &CsvSchema) -> Result<Dataset> {
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let group_col = find(&schema.group).ok_or_else(|| NmeError::MissingColumn(schema.group.clone()))?;
    let time_col = find(&schema.time).ok_or_else(|| NmeError::MissingColumn(schema.time.clone()))?;
    let label_col = find(&schema.label).ok_or_else(|| NmeError::MissingColumn(schema.label.clone()))?;
    let seq_col = find(&schema.sequence);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != group_col && c != time_col && c != label_col && Some(c) != seq_col)
        .collect();
    let d = feature_cols.len();

    if seq_col.is_some() && schema.task == CsvTask::Regression {
        return Err(NmeError::InvalidDataset(
            "sequence column requires a classification task".into(),
        ));
    }

    struct Row {
        group: String,
        t: i64,
        features: Vec<f64>,
        label: Target,
        sequence: Option<String>,
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // 1-based data row numbering, header excluded.
        let row = i + 1;
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let err = |c: usize, message: String| NmeError::Parse {
            row,
            column: headers.get(c).unwrap_or("").to_string(),
            message,
        };
        let group = cell(group_col).to_string();
        if group.is_empty() {
            return Err(err(group_col, "empty group id".into()));
        }
        let t: i64 = cell(time_col)
            .parse()
            .map_err(|_| err(time_col, format!("time index '{}' is not an integer", cell(time_col))))?;
        let mut features = Vec::with_capacity(d);
        for &c in &feature_cols {
            let v: f64 = cell(c)
                .parse()
                .map_err(|_| err(c, format!("'{}' is not numeric", cell(c))))?;
            features.push(v);
        }
        let raw = cell(label_col);
        let label = match schema.task {
            CsvTask::Regression => Target::Real(
                raw.parse()
                    .map_err(|_| err(label_col, format!("label '{raw}' is not numeric")))?,
            ),
            CsvTask::Classification { classes } => {
                let k: usize = raw
                    .parse()
                    .map_err(|_| err(label_col, format!("unknown class label '{raw}'")))?;
                if let Some(classes) = classes {
                    if k >= classes {
                        return Err(err(label_col, format!("unknown class label '{raw}'")));
                    }
                }
                Target::Class(k)
            }
        };
        rows.push(Row {
            group,
            t,
            features,
            label,
            sequence: seq_col.map(|c| cell(c).to_string()),
        });
    }

    let classes = match schema.task {
        CsvTask::Regression => None,
        CsvTask::Classification { classes: Some(k) } => Some(k),
        CsvTask::Classification { classes: None } => Some(
            rows.iter()
                .filter_map(|r| r.label.as_class())
                .max()
                .map_or(0, |m| m + 1),
        ),
    };

    if seq_col.is_none() {
        let task = match classes {
            None => TaskKind::Regression,
            Some(classes) => TaskKind::Multiclass { classes },
        };
        let obs = rows
            .into_iter()
            .map(|r| {
                Ok(Observation {
                    group: r.group.try_into()?,
                    t: r.t,
                    features: r.features,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Dataset::from_observations(task, d, obs);
    }

    // Sequences keep first-appearance order; steps keep row order.
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut seqs: Vec<SequenceObservation> = Vec::new();
    for r in rows {
        let key = (r.group.clone(), r.sequence.clone().unwrap_or_default());
        let state = r.label.as_class().expect("classification labels");
        let step = Step {
            features: r.features,
            state,
        };
        match index.get(&key) {
            Some(&i) => seqs[i].steps.push(step),
            None => {
                index.insert(key.clone(), seqs.len());
                seqs.push(SequenceObservation {
                    group: key.0.try_into()?,
                    sequence_id: key.1,
                    t: r.t,
                    steps: vec![step],
                });
            }
        }
    }
    Dataset::from_sequences(classes.unwrap_or(0), d, seqs)
}
