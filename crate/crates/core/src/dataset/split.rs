use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Dataset, GroupId, Records};
use crate::error::{NmeError, Result};

// Guards floor() against products like 0.6 * 5 landing just below an integer.
const FLOOR_EPS: f64 = 1e-9;

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + FLOOR_EPS).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// (group, t) of each record, in dataset order.
fn record_keys(ds: &Dataset) -> Vec<(&GroupId, i64)> {
    match ds.records() {
        Records::Points(o) => o.iter().map(|x| (&x.group, x.t)).collect(),
        Records::Sequences(s) => s.iter().map(|x| (&x.group, x.t)).collect(),
    }
}

/// Record indices per group, ordered by time (stable for ties).
fn time_ordered_indices(ds: &Dataset) -> BTreeMap<&GroupId, Vec<usize>> {
    let keys = record_keys(ds);
    let mut by_group: BTreeMap<&GroupId, Vec<usize>> = BTreeMap::new();
    for (i, (g, _)) in keys.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    for idx in by_group.values_mut() {
        idx.sort_by_key(|&i| keys[i].1);
    }
    by_group
}

fn select(ds: &Dataset, assignment: &[Option<usize>], part: usize) -> Dataset {
    let records = match ds.records() {
        Records::Points(o) => Records::Points(
            o.iter()
                .zip(assignment)
                .filter(|(_, a)| **a == Some(part))
                .map(|(x, _)| x.clone())
                .collect(),
        ),
        Records::Sequences(s) => Records::Sequences(
            s.iter()
                .zip(assignment)
                .filter(|(_, a)| **a == Some(part))
                .map(|(x, _)| x.clone())
                .collect(),
        ),
    };
    ds.with_records(records)
}

/// Temporal within-group split: per group the earliest `floor(train * n)`
/// records go to train, the next `floor(val * n)` to validation, the rest to
/// test. Sequences are split as whole units. Dataset order is preserved
/// inside each split.
pub fn split_within_group(ds: &Dataset, fractions: SplitFractions) -> Result<(Dataset, Dataset, Dataset)> {
    let SplitFractions { train, val, test } = fractions;
    if train <= 0.0 || val < 0.0 || test < 0.0 || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(NmeError::invalid(format!(
            "split fractions must be non-negative and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    let mut assignment = vec![None; ds.len()];
    for (group, idx) in time_ordered_indices(ds) {
        let n = idx.len();
        if n < 3 {
            return Err(NmeError::TooFewObservations {
                group: group.to_string(),
                count: n,
                required: 3,
            });
        }
        let n_train = floor_count(train, n);
        let n_val = floor_count(val, n);
        for (rank, &i) in idx.iter().enumerate() {
            assignment[i] = Some(if rank < n_train {
                0
            } else if rank < n_train + n_val {
                1
            } else {
                2
            });
        }
    }
    Ok((select(ds, &assignment, 0), select(ds, &assignment, 1), select(ds, &assignment, 2)))
}

/// Drops every group with fewer than `min` observations (sequence steps
/// count individually).
pub fn filter_min_observations(ds: &Dataset, min: usize) -> Result<Dataset> {
    let keep: HashSet<GroupId> = ds
        .group_counts()
        .into_iter()
        .filter(|&(_, n)| n >= min)
        .map(|(g, _)| g)
        .collect();
    if keep.is_empty() {
        return Err(NmeError::NoGroupsSurvive);
    }
    Ok(ds.retain_groups(|g| keep.contains(g)))
}

/// Keeps each group's earliest `floor(fraction * n)` records. Groups left
/// empty are dropped and returned.
pub fn take_group_fraction(ds: &Dataset, fraction: f64) -> Result<(Dataset, Vec<GroupId>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(NmeError::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut assignment = vec![None; ds.len()];
    let mut excluded = Vec::new();
    for (group, idx) in time_ordered_indices(ds) {
        let keep = floor_count(fraction, idx.len());
        if keep == 0 {
            excluded.push(group.clone());
        }
        for &i in idx.iter().take(keep) {
            assignment[i] = Some(0);
        }
    }
    Ok((select(ds, &assignment, 0), excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Observation, Target, TaskKind};
    use proptest::prelude::*;

    fn dataset(counts: &[(&str, usize)]) -> Dataset {
        let mut obs = Vec::new();
        for &(g, n) in counts {
            for t in 0..n {
                obs.push(Observation {
                    group: g.into(),
                    t: t as i64,
                    features: vec![t as f64],
                    label: Target::Real(0.0),
                });
            }
        }
        Dataset::from_observations(TaskKind::Regression, 1, obs).unwrap()
    }

    fn sizes(ds: &(Dataset, Dataset, Dataset)) -> (usize, usize, usize) {
        (ds.0.len(), ds.1.len(), ds.2.len())
    }

    #[test]
    fn ten_observations_split_six_two_two() {
        let s = split_within_group(&dataset(&[("a", 10)]), SplitFractions::default()).unwrap();
        assert_eq!(sizes(&s), (6, 2, 2));
    }

    #[test]
    fn seven_observations_floor_rule() {
        let s = split_within_group(&dataset(&[("a", 7)]), SplitFractions::default()).unwrap();
        assert_eq!(sizes(&s), (4, 1, 2));
    }

    #[test]
    fn two_observations_error() {
        assert!(matches!(
            split_within_group(&dataset(&[("a", 2)]), SplitFractions::default()),
            Err(NmeError::TooFewObservations { count: 2, .. })
        ));
    }

    #[test]
    fn split_follows_time_not_file_order() {
        let mut obs: Vec<Observation> = (0..5)
            .map(|t| Observation {
                group: "a".into(),
                t,
                features: vec![t as f64],
                label: Target::Real(0.0),
            })
            .collect();
        obs.reverse();
        let ds = Dataset::from_observations(TaskKind::Regression, 1, obs).unwrap();
        let (train, val, test) = split_within_group(&ds, SplitFractions::default()).unwrap();
        // file order is kept within each split
        assert_eq!(train.observations().iter().map(|o| o.t).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert_eq!(val.observations()[0].t, 3);
        assert_eq!(test.observations()[0].t, 4);
    }

    #[test]
    fn filter_thresholds() {
        let ds = dataset(&[("a", 12), ("b", 9), ("c", 10)]);
        let f = filter_min_observations(&ds, 10).unwrap();
        assert_eq!(f.groups(), vec![GroupId::from("a"), GroupId::from("c")]);
        let all = dataset(&[("a", 10), ("b", 11)]);
        assert_eq!(filter_min_observations(&all, 10).unwrap(), all);
        assert!(matches!(
            filter_min_observations(&dataset(&[("a", 3), ("b", 9)]), 10),
            Err(NmeError::NoGroupsSurvive)
        ));
    }

    #[test]
    fn fraction_takes_earliest_and_reports_empty_groups() {
        let ds = dataset(&[("a", 20), ("b", 4)]);
        let (sub, excluded) = take_group_fraction(&ds, 0.2).unwrap();
        assert_eq!(excluded, vec![GroupId::from("b")]);
        assert_eq!(sub.observations().iter().map(|o| o.t).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let (full, none) = take_group_fraction(&ds, 1.0).unwrap();
        assert_eq!(full, ds);
        assert!(none.is_empty());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_exhaustive_and_ordered(counts in proptest::collection::vec(3usize..60, 1..6)) {
            let named: Vec<(String, usize)> = counts.iter().enumerate().map(|(i, &n)| (format!("g{i}"), n)).collect();
            let refs: Vec<(&str, usize)> = named.iter().map(|(g, n)| (g.as_str(), *n)).collect();
            let ds = dataset(&refs);
            let (train, val, test) = split_within_group(&ds, SplitFractions::default()).unwrap();
            prop_assert_eq!(train.len() + val.len() + test.len(), ds.len());
            for (g, n) in &named {
                let ts = |d: &Dataset| -> Vec<i64> {
                    d.observations().iter().filter(|o| o.group.as_str() == g).map(|o| o.t).collect()
                };
                let (a, b, c) = (ts(&train), ts(&val), ts(&test));
                prop_assert_eq!(a.len(), (0.6 * *n as f64 + 1e-9).floor() as usize);
                prop_assert_eq!(a.len() + b.len() + c.len(), *n);
                let max_train = a.iter().max().copied().unwrap_or(-1);
                let min_val = b.iter().min().copied().unwrap_or(i64::MAX);
                let max_val = b.iter().max().copied().unwrap_or(max_train);
                let min_test = c.iter().min().copied().unwrap_or(i64::MAX);
                prop_assert!(max_train < min_val.min(min_test));
                prop_assert!(max_val < min_test);
            }
        }
    }
}
