use serde::{Deserialize, Serialize};

use super::{Dataset, Records, Target};
use crate::error::{NmeError, Result};

/// Per-feature z-normalization statistics fitted on a training split.
/// Standard deviations use the population formula; constant columns get a
/// standard deviation of 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: Option<f64>,
    pub label_std: Option<f64>,
}

fn mean_std<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let rows: Vec<&Vec<f64>> = match train.records() {
            Records::Points(o) => o.iter().map(|x| &x.features).collect(),
            Records::Sequences(s) => s.iter().flat_map(|x| x.steps.iter().map(|st| &st.features)).collect(),
        };
        if rows.is_empty() {
            return Err(NmeError::InvalidDataset("cannot normalize on an empty training split".into()));
        }
        let d = train.feature_dim();
        let (feature_mean, feature_std) = (0..d)
            .map(|j| mean_std(rows.iter().map(move |r| &r[j])))
            .unzip();
        let labels: Vec<f64> = train.observations().iter().filter_map(|o| o.label.as_real()).collect();
        let (label_mean, label_std) = if labels.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(labels.iter());
            (Some(m), Some(s))
        };
        Ok(NormStats {
            feature_mean,
            feature_std,
            label_mean,
            label_std,
        })
    }

    pub fn normalize_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_label(&self, y: f64) -> f64 {
        match (self.label_mean, self.label_std) {
            (Some(m), Some(s)) => (y - m) / s,
            _ => y,
        }
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        match (self.label_mean, self.label_std) {
            (Some(m), Some(s)) => z * s + m,
            _ => z,
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.feature_dim() != self.feature_mean.len() {
            return Err(NmeError::DimensionMismatch {
                expected: self.feature_mean.len(),
                got: ds.feature_dim(),
            });
        }
        let records = match ds.records() {
            Records::Points(o) => Records::Points(
                o.iter()
                    .map(|x| {
                        let mut x = x.clone();
                        x.features = self.normalize_features(&x.features);
                        if let Target::Real(y) = x.label {
                            x.label = Target::Real(self.normalize_label(y));
                        }
                        x
                    })
                    .collect(),
            ),
            Records::Sequences(s) => Records::Sequences(
                s.iter()
                    .map(|x| {
                        let mut x = x.clone();
                        for st in &mut x.steps {
                            st.features = self.normalize_features(&st.features);
                        }
                        x
                    })
                    .collect(),
            ),
        };
        Ok(ds.with_records(records))
    }
}

/// Fits statistics on `train` and applies them to `train` and every other split.
pub fn znormalize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, NormStats)> {
    let stats = NormStats::fit(train)?;
    let train_n = stats.apply(train)?;
    let others_n = others.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((train_n, others_n, stats))
}
