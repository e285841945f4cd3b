//! Evaluation metrics, per-group aggregation and paired group-level
//! bootstrap comparisons. All moments are population moments.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupId};
use crate::error::{NmeError, Result};
use crate::math::{covariance, mean, pearson, variance};
use crate::mlp::Mlp;
use crate::params::MixedParameterBank;

/// Default minimum number of test observations for a group to be scored.
pub const MIN_GROUP_OBSERVATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Nrmse,
    Ccc,
    Pearson,
    KrippendorffAlpha,
    Mse,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Nrmse | MetricKind::Mse)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Nrmse => "nrmse",
            MetricKind::Ccc => "ccc",
            MetricKind::Pearson => "pearson",
            MetricKind::KrippendorffAlpha => "krippendorff_alpha",
            MetricKind::Mse => "mse",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, MetricKind::KrippendorffAlpha)
    }

    /// Evaluates the metric; class labels are passed as integral reals.
    pub fn compute(self, pred: &[f64], truth: &[f64]) -> Result<f64> {
        match self {
            MetricKind::Nrmse => nrmse(pred, truth),
            MetricKind::Ccc => ccc(pred, truth),
            MetricKind::Pearson => pearson_r(pred, truth),
            MetricKind::Mse => mse(pred, truth),
            MetricKind::KrippendorffAlpha => {
                let to_class = |v: &f64| -> Result<usize> {
                    if *v >= 0.0 && v.fract() == 0.0 {
                        Ok(*v as usize)
                    } else {
                        Err(NmeError::invalid(format!("{v} is not a class index")))
                    }
                };
                let p = pred.iter().map(to_class).collect::<Result<Vec<_>>>()?;
                let t = truth.iter().map(to_class).collect::<Result<Vec<_>>>()?;
                let k = p.iter().chain(&t).max().map_or(0, |m| m + 1);
                krippendorff_alpha(&p, &t, k)
            }
        }
    }

    /// Strictly better, respecting the metric's direction.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

fn check_lengths(pred: &[f64], truth: &[f64], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(NmeError::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if truth.len() < min {
        return Err(NmeError::UndefinedMetric(format!("need at least {min} values, got {}", truth.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// RMSE divided by the standard deviation of the truth.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let var = variance(truth);
    if var == 0.0 {
        return Err(NmeError::UndefinedMetric("NRMSE of constant ground truth".into()));
    }
    Ok((mse(pred, truth)? / var).sqrt())
}

/// Concordance correlation coefficient; 0 when both inputs are constant.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let denom = variance(pred) + variance(truth) + (mean(pred) - mean(truth)).powi(2);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * covariance(pred, truth) / denom)
}

pub fn pearson_r(pred: &[f64], truth: &[f64]) -> Result<f64> {
    pearson(pred, truth)
}

/// Nominal Krippendorff's alpha between two complete codings, via the
/// coincidence matrix.
pub fn krippendorff_alpha(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(NmeError::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(NmeError::UndefinedMetric("alpha needs at least 2 pairable values".into()));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= k) {
        return Err(NmeError::invalid(format!("class {c} out of range for K = {k}")));
    }
    // every unit has two values, so each ordered pair adds 1 / (2 - 1)
    let mut coincidence = vec![0.0; k * k];
    for (&a, &b) in pred.iter().zip(truth) {
        coincidence[a * k + b] += 1.0;
        coincidence[b * k + a] += 1.0;
    }
    let marginals: Vec<f64> = (0..k).map(|c| coincidence[c * k..(c + 1) * k].iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed += coincidence[c * k + d];
                expected += marginals[c] * marginals[d];
            }
        }
    }
    if expected == 0.0 {
        return Err(NmeError::UndefinedMetric("alpha undefined when only one category occurs".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Predictions and ground truth of one group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupPredictions {
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub per_group: BTreeMap<GroupId, f64>,
    pub aggregate: f64,
    pub group_count: usize,
    /// Groups left out, with the reason.
    pub dropped: BTreeMap<GroupId, String>,
}

impl EvalReport {
    /// Writes `group,metric,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "metric", "value"])?;
        for (g, v) in &self.per_group {
            w.write_record([g.as_str(), self.metric.name(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every group separately and averages the scores (unweighted).
/// Groups with fewer than `min_observations` values or an undefined metric
/// are dropped and recorded.
pub fn per_group_report(
    metric: MetricKind,
    groups: &BTreeMap<GroupId, GroupPredictions>,
    min_observations: usize,
) -> Result<EvalReport> {
    let mut per_group = BTreeMap::new();
    let mut dropped = BTreeMap::new();
    for (g, p) in groups {
        if p.truth.len() < min_observations {
            dropped.insert(
                g.clone(),
                format!("{} observations, fewer than {min_observations}", p.truth.len()),
            );
            continue;
        }
        match metric.compute(&p.pred, &p.truth) {
            Ok(v) => {
                per_group.insert(g.clone(), v);
            }
            Err(NmeError::UndefinedMetric(why)) => {
                dropped.insert(g.clone(), why);
            }
            Err(e) => return Err(e),
        }
    }
    if per_group.is_empty() {
        return Err(NmeError::UndefinedMetric(format!("no group could be scored with {}", metric.name())));
    }
    let values: Vec<f64> = per_group.values().copied().collect();
    Ok(EvalReport {
        metric,
        aggregate: mean(&values),
        group_count: per_group.len(),
        per_group,
        dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_difference: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
    /// The interval excludes zero.
    pub significant: bool,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of the mean of per-group differences. Resample `r`
/// draws from its own stream of the seeded generator, so the result does
/// not depend on thread scheduling.
pub fn bootstrap_differences(differences: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    if differences.is_empty() || resamples == 0 {
        return Err(NmeError::invalid("bootstrap needs at least one group and one resample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(NmeError::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let n = differences.len();
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            (0..n).map(|_| differences[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lower = quantile(&means, tail);
    let upper = quantile(&means, 1.0 - tail);
    Ok(BootstrapResult {
        mean_difference: mean(differences),
        lower,
        upper,
        level,
        resamples,
        significant: lower > 0.0 || upper < 0.0,
    })
}

/// Paired group-clustered bootstrap of `a - b` over per-group metrics.
pub fn paired_cluster_bootstrap(
    a: &EvalReport,
    b: &EvalReport,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if a.per_group.len() != b.per_group.len() || a.per_group.keys().zip(b.per_group.keys()).any(|(x, y)| x != y) {
        return Err(NmeError::GroupMismatch(format!(
            "{} groups vs {} groups",
            a.per_group.len(),
            b.per_group.len()
        )));
    }
    let diffs: Vec<f64> = a.per_group.values().zip(b.per_group.values()).map(|(x, y)| x - y).collect();
    bootstrap_differences(&diffs, resamples, level, seed)
}

/// Correlation between each group's last-layer bias delta and its mean
/// label in `train` (labels as stored, i.e. normalized if `train` is).
pub fn bias_baseline_correlation(mlp: &Mlp, bank: &MixedParameterBank, train: &Dataset) -> Result<f64> {
    let (bias, means) = bias_baseline_pairs(mlp, bank, train)?;
    if bias.len() < 3 {
        return Err(NmeError::invalid(format!("need at least 3 groups, got {}", bias.len())));
    }
    pearson(&bias, &means)
}

/// Paired (bias delta, mean training label) per group.
pub fn bias_baseline_pairs(mlp: &Mlp, bank: &MixedParameterBank, train: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let deltas = mlp.last_bias_deltas(bank)?;
    let means = train.group_label_means();
    let mut bias = Vec::new();
    let mut base = Vec::new();
    for (g, d) in &deltas {
        if let Some(m) = means.get(g) {
            bias.push(*d);
            base.push(*m);
        }
    }
    Ok((bias, base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assume, prop_oneof, proptest};

    #[test]
    fn nrmse_examples() {
        let t = [0.3, 1.2, -0.7, 2.0];
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        let m = mean(&t);
        assert!((nrmse(&[m; 4], &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((nrmse(&[1.0, 1.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(nrmse(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn ccc_examples() {
        let t = [1.0, 2.0, 3.0];
        assert!((ccc(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((ccc(&[3.0, 2.0, 1.0], &t).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[2.0; 3], &t).unwrap(), 0.0);
        assert_eq!(ccc(&[1.0; 3], &[1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_examples() {
        let t = [1.0, 2.0, 3.0, 5.0];
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&affine, &t).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pearson_r(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_r(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    /// Independent route: disagreement over all pairs of pooled values.
    fn alpha_by_pairs(pred: &[usize], truth: &[usize]) -> f64 {
        let pooled: Vec<usize> = pred.iter().chain(truth).copied().collect();
        let n = pooled.len() as f64;
        let mut between = 0.0;
        for i in 0..pooled.len() {
            for j in 0..pooled.len() {
                if i != j && pooled[i] != pooled[j] {
                    between += 1.0;
                }
            }
        }
        let d_e = between / (n * (n - 1.0));
        let d_o = pred.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 * 2.0 / n;
        1.0 - d_o / d_e
    }

    #[test]
    fn krippendorff_examples() {
        assert_eq!(krippendorff_alpha(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        let a = krippendorff_alpha(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((a - alpha_by_pairs(&[0, 1, 1, 1], &[0, 0, 1, 1])).abs() < 1e-12);
        assert!((a - (1.0 - 14.0 / 30.0)).abs() < 1e-12);
        assert!(krippendorff_alpha(&[], &[], 2).is_err());
        assert!(krippendorff_alpha(&[1, 1], &[1, 1], 2).is_err());
    }

    #[test]
    fn krippendorff_near_zero_for_independent_codings() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        assert!(krippendorff_alpha(&pred, &truth, 4).unwrap().abs() < 0.05);
    }

    fn report(values: &[(&str, f64)]) -> EvalReport {
        let per_group: BTreeMap<GroupId, f64> = values.iter().map(|(g, v)| (GroupId::from(*g), *v)).collect();
        EvalReport {
            metric: MetricKind::Nrmse,
            aggregate: mean(&per_group.values().copied().collect::<Vec<_>>()),
            group_count: per_group.len(),
            per_group,
            dropped: BTreeMap::new(),
        }
    }

    fn preds(n: usize, offset: f64) -> GroupPredictions {
        let truth: Vec<f64> = (0..n).map(|i| i as f64).collect();
        GroupPredictions {
            pred: truth.iter().map(|t| t + offset * if (*t as usize) % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            truth,
        }
    }

    #[test]
    fn per_group_aggregation() {
        let mut groups = BTreeMap::new();
        groups.insert(GroupId::from("a"), preds(12, 0.5));
        let single = per_group_report(MetricKind::Mse, &groups, 10).unwrap();
        assert_eq!(single.aggregate, single.per_group[&GroupId::from("a")]);

        let mut two = BTreeMap::new();
        two.insert(GroupId::from("a"), GroupPredictions { pred: vec![0.2; 10], truth: vec![0.0; 10] });
        let mut b = GroupPredictions { pred: vec![0.4; 400], truth: vec![0.0; 400] };
        b.pred[0] = 0.4;
        two.insert(GroupId::from("b"), b);
        let r = per_group_report(MetricKind::Mse, &two, 10).unwrap();
        let (ma, mb) = (0.2f64 * 0.2, 0.4f64 * 0.4);
        assert!((r.aggregate - (ma + mb) / 2.0).abs() < 1e-12);

        groups.insert(GroupId::from("short"), preds(9, 0.5));
        let r = per_group_report(MetricKind::Mse, &groups, 10).unwrap();
        assert_eq!(r.group_count, 1);
        assert!(r.dropped.contains_key(&GroupId::from("short")));
    }

    #[test]
    fn undefined_group_metric_is_dropped() {
        let mut groups = BTreeMap::new();
        groups.insert(GroupId::from("a"), preds(12, 0.5));
        groups.insert(GroupId::from("flat"), GroupPredictions { pred: vec![1.0; 12], truth: vec![2.0; 12] });
        let r = per_group_report(MetricKind::Nrmse, &groups, 10).unwrap();
        assert_eq!(r.group_count, 1);
        assert!(r.dropped.contains_key(&GroupId::from("flat")));
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let a = report(&[("a", 0.3), ("b", 0.5), ("c", 0.1)]);
        let same = paired_cluster_bootstrap(&a, &a, 10_000, 0.95, 1).unwrap();
        assert_eq!((same.lower, same.upper), (0.0, 0.0));
        assert!(!same.significant);
        let b = report(&[("a", -0.7), ("b", -0.5), ("c", -0.9)]);
        let shifted = paired_cluster_bootstrap(&a, &b, 10_000, 0.95, 1).unwrap();
        assert!((shifted.lower - 1.0).abs() < 1e-12 && (shifted.upper - 1.0).abs() < 1e-12);
        assert!(shifted.significant);
        let c = report(&[("a", 0.3), ("x", 0.5), ("c", 0.1)]);
        assert!(matches!(paired_cluster_bootstrap(&a, &c, 100, 0.95, 1), Err(NmeError::GroupMismatch(_))));
    }

    #[test]
    fn bootstrap_is_seed_deterministic_and_shrinks_with_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::StandardNormal;
        let small: Vec<f64> = (0..25).map(|_| rng.sample(normal)).collect();
        let large: Vec<f64> = (0..400).map(|_| rng.sample(normal)).collect();
        let r1 = bootstrap_differences(&small, 2_000, 0.95, 9).unwrap();
        let r2 = bootstrap_differences(&small, 2_000, 0.95, 9).unwrap();
        assert_eq!(r1, r2);
        let r3 = bootstrap_differences(&large, 2_000, 0.95, 9).unwrap();
        let ratio = (r1.upper - r1.lower) / (r3.upper - r3.lower);
        // sqrt(400 / 25) = 4
        assert!(ratio > 3.0 && ratio < 5.3, "{ratio}");
        assert!(r1.lower <= r1.mean_difference && r1.mean_difference <= r1.upper);
    }

    #[test]
    fn report_csv() {
        let r = report(&[("a", 0.25)]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "group,metric,value\na,nrmse,0.25\n");
    }

    proptest! {
        #[test]
        fn nrmse_affine_invariant(
            truth in proptest::collection::vec(-10.0f64..10.0, 3..30),
            noise in proptest::collection::vec(-1.0f64..1.0, 30),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -10.0f64..10.0,
        ) {
            prop_assume!(variance(&truth) > 1e-6);
            let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
            let base = nrmse(&pred, &truth).unwrap();
            let tp: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
            let tt: Vec<f64> = truth.iter().map(|v| a * v + b).collect();
            prop_assert!((nrmse(&tp, &tt).unwrap() - base).abs() < 1e-9 * (1.0 + base));
        }

        #[test]
        fn ccc_bounded_by_pearson(
            truth in proptest::collection::vec(-10.0f64..10.0, 3..30),
            pred in proptest::collection::vec(-10.0f64..10.0, 30),
        ) {
            let pred = &pred[..truth.len()];
            prop_assume!(variance(&truth) > 1e-6 && variance(pred) > 1e-6);
            let c = ccc(pred, &truth).unwrap();
            let r = pearson_r(pred, &truth).unwrap();
            prop_assert!(c.abs() <= r.abs() + 1e-12);
            prop_assert!(c.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn ccc_equals_pearson_with_matched_moments(truth in proptest::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            prop_assume!(variance(&truth) > 1e-6);
            let mut pred = truth.clone();
            pred.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let c = ccc(&pred, &truth).unwrap();
            let r = pearson_r(&pred, &truth).unwrap();
            prop_assert!((c - r).abs() < 1e-9);
        }

        #[test]
        fn krippendorff_symmetric(pairs in proptest::collection::vec((0usize..4, 0usize..4), 2..60)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            match (krippendorff_alpha(&p, &t, 4), krippendorff_alpha(&t, &p, 4)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!(x <= 1.0 + 1e-12);
                    prop_assert!((x - alpha_by_pairs(&p, &t)).abs() < 1e-9);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric definedness"),
            }
        }
    }
}
