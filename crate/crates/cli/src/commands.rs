//! Implementations of the `nme` subcommands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use nme_core::crf::write_transition_csv;
use nme_core::dataset::{filter_min_observations, split_within_group, znormalize, Dataset, NormStats, Records};
use nme_core::lme::{fit_lme_head, predict_lme, representations};
use nme_core::metrics::{paired_cluster_bootstrap, per_group_report, BootstrapResult, GroupPredictions};
use nme_core::trainer::{
    data_fraction_curve, gridsearch as run_grid, BuiltModel, FitResult, FractionRow, ModelKind, TrainConfig, TrainMode,
};
use nme_core::NmeError;

use crate::config::{read_json, ExperimentConfig, SynthSpec};
use crate::error::{CliError, CliResult};
use crate::record::{DataSummary, RunRecord};

const LME_NOTE: &str =
    "mlp_lme: the feature extractor is trained first as a generic MLP and frozen; the LME head is then fit by EM on its last hidden layer";

/// Filtered, split and normalized data of one experiment.
pub struct Prepared {
    pub all: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
    pub summary: DataSummary,
}

/// Load, filter, split within group, then z-normalize with train statistics.
pub fn prepare(cfg: &ExperimentConfig, base: &Path) -> CliResult<Prepared> {
    let raw = cfg.dataset.load(base)?;
    cfg.validate_for(raw.task())?;
    let all = filter_min_observations(&raw, cfg.min_observations).map_err(|e| CliError::at("min_observations", e))?;
    let (train, val, test) = split_within_group(&all, cfg.split).map_err(|e| CliError::at("split", e))?;
    let (train_n, mut others, norm) = znormalize(&train, &[&val, &test])?;
    let test_n = others.pop().expect("two splits");
    let val_n = others.pop().expect("two splits");
    let summary = DataSummary::new(&all, &train_n, &val_n, &test)?;
    Ok(Prepared {
        all,
        train: train_n,
        val: val_n,
        test: test_n,
        norm,
        summary,
    })
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(cfg.run_id())
}

fn created_at() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_traces(path: &Path, fit: &FitResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", fit.metric.name(), "sigma2", "mean_delta_norm"])?;
    for e in 0..fit.epochs_run {
        w.write_record([
            e.to_string(),
            fit.train_loss[e].to_string(),
            fit.val_metric[e].to_string(),
            fit.sigma2[e].to_string(),
            fit.mean_delta_norm[e].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fits the configured model and scores it on the test split.
fn fit_model(
    cfg: &ExperimentConfig,
    data: &Prepared,
) -> CliResult<(BuiltModel, FitResult, Option<nme_core::lme::LmeHead>, nme_core::metrics::EvalReport, Vec<String>)> {
    let tc = &cfg.train;
    let mut notes = Vec::new();
    let mode = if cfg.model.kind == ModelKind::MlpLme {
        notes.push(LME_NOTE.to_string());
        TrainMode::Generic
    } else {
        tc.mode
    };
    let tc = TrainConfig { mode, ..tc.clone() };
    let (model, bank) = cfg
        .model
        .build(data.train.task(), data.train.feature_dim(), data.train.groups(), mode, tc.seed)
        .map_err(|e| CliError::at("model", e))?;
    let fit = model.fit(bank, &data.train, &data.val, &tc)?;
    if cfg.model.kind != ModelKind::MlpLme {
        let report = model.evaluate(&fit.best.bank, &data.test, cfg.metric, cfg.test_min_observations)?;
        return Ok((model, fit, None, report, notes));
    }

    let BuiltModel::Mlp(mlp) = &model else {
        unreachable!("mlp_lme builds an MLP")
    };
    let reps = representations(mlp, &fit.best.bank, &data.train)?;
    let head = fit_lme_head(&reps, cfg.lme)?;
    let params = fit.best.bank.effective_params_at(None);
    let mut preds: std::collections::BTreeMap<_, GroupPredictions> = Default::default();
    for o in data.test.observations() {
        let z = mlp.representation(&params, &o.features)?;
        let p = preds.entry(o.group.clone()).or_default();
        p.pred.push(predict_lme(&head, &z, &o.group)?);
        p.truth.push(o.label.value());
    }
    let report = per_group_report(cfg.metric, &preds, cfg.test_min_observations)?;
    Ok((model, fit, Some(head), report, notes))
}

/// Runs the full pipeline and writes `<run_id>.run.json` plus metric CSVs
/// into `<output_dir>/<run_id>/`.
pub fn train(cfg: ExperimentConfig, base: &Path) -> CliResult<(RunRecord, PathBuf)> {
    let data = prepare(&cfg, base)?;
    let (model, fit, lme_head, test, notes) = fit_model(&cfg, &data)?;
    let record = RunRecord {
        run_id: cfg.run_id(),
        created_at: created_at(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        data: data.summary,
        normalization: data.norm,
        model,
        fit,
        lme_head,
        test,
        notes,
    };
    let dir = run_dir(&cfg);
    let path = record.save(&dir)?;
    record.test.write_csv(File::create(dir.join(format!("{}.test_metrics.csv", record.run_id)))?)?;
    write_traces(&dir.join(format!("{}.traces.csv", record.run_id)), &record.fit)?;
    Ok((record, path))
}

/// Paired group-clustered bootstrap of `a - b` on the runs' test metrics.
pub fn compare(a: &Path, b: &Path, seed: u64, resamples: usize) -> CliResult<BootstrapResult> {
    let (ra, rb) = (RunRecord::load(a)?, RunRecord::load(b)?);
    if ra.data.test_fingerprint != rb.data.test_fingerprint {
        return Err(CliError::config("runs were evaluated on different datasets or splits"));
    }
    if ra.test.metric != rb.test.metric {
        return Err(CliError::config(format!(
            "runs report different metrics ({} vs {})",
            ra.test.metric.name(),
            rb.test.metric.name()
        )));
    }
    Ok(paired_cluster_bootstrap(&ra.test, &rb.test, resamples, 0.95, seed)?)
}

/// Data-fraction ablation over NME, uNME and generic training.
pub fn ablate(cfg: ExperimentConfig, base: &Path, fractions: Option<Vec<f64>>) -> CliResult<(Vec<FractionRow>, PathBuf)> {
    if cfg.model.kind == ModelKind::MlpLme {
        return Err(CliError::config("model.kind: ablations need model mlp or crf"));
    }
    let fractions = fractions.unwrap_or_else(|| cfg.fractions.clone());
    let data = prepare(&cfg, base)?;
    let modes = [TrainMode::Nme, TrainMode::Unme, TrainMode::Generic];
    let rows = data_fraction_curve(
        &cfg.model,
        &data.train,
        &data.val,
        &data.test,
        &fractions,
        &modes,
        &cfg.train,
        cfg.test_min_observations,
    )
    .map_err(|e| match e {
        NmeError::InvalidArgument(m) => CliError::config(format!("fractions: {m}")),
        other => other.into(),
    })?;

    let dir = run_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.ablation.csv", cfg.run_id()));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["mode", "fraction", "metric", "group_count"])?;
    for r in &rows {
        w.write_record([r.mode.name(), &r.fraction.to_string(), &r.metric.to_string(), &r.group_count.to_string()])?;
    }
    w.flush()?;
    let mut long = csv::Writer::from_path(dir.join(format!("{}.ablation_long.csv", cfg.run_id())))?;
    long.write_record(["mode", "fraction", "group", "metric", "value"])?;
    for r in &rows {
        for (g, v) in &r.report.per_group {
            long.write_record([r.mode.name(), &r.fraction.to_string(), g.as_str(), cfg.metric.name(), &v.to_string()])?;
        }
    }
    long.flush()?;
    Ok((rows, path))
}

/// Exports delta norms, last-layer bias deltas and CRF transition matrices.
pub fn inspect(record_path: &Path, out: Option<PathBuf>) -> CliResult<Vec<PathBuf>> {
    let record = RunRecord::load(record_path)?;
    let dir = out.unwrap_or_else(|| record_path.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let bank = &record.fit.best.bank;
    let mut written = Vec::new();

    let norms_path = dir.join(format!("{}.delta_norms.csv", record.run_id));
    let mut f = File::create(&norms_path)?;
    if bank.mixed_dim() == 0 {
        writeln!(f, "# this run has no group-specific parameters")?;
    }
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["group", "delta_norm"])?;
    if bank.mixed_dim() > 0 {
        for (g, n) in bank.delta_norms() {
            w.write_record([g.as_str(), &n.to_string()])?;
        }
    }
    w.flush()?;
    written.push(norms_path);

    match &record.model {
        BuiltModel::Mlp(mlp) if bank.mixed_dim() > 0 => {
            if let Ok(deltas) = mlp.last_bias_deltas(bank) {
                let path = dir.join(format!("{}.bias_deltas.csv", record.run_id));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["group", "bias_delta", "train_label_mean", "observations"])?;
                for (g, d) in deltas {
                    let Some(mean) = record.data.train_label_means.get(&g) else { continue };
                    let count = record.data.train_counts.get(&g).copied().unwrap_or(0)
                        + record.data.val_counts.get(&g).copied().unwrap_or(0)
                        + record.data.test_counts.get(&g).copied().unwrap_or(0);
                    w.write_record([g.as_str(), &d.to_string(), &mean.to_string(), &count.to_string()])?;
                }
                w.flush()?;
                written.push(path);
            }
        }
        BuiltModel::Crf(crf) => {
            let path = dir.join(format!("{}.transitions.csv", record.run_id));
            let mats: Vec<_> = bank.groups().iter().map(|g| (g.clone(), crf.transition_matrix(bank, g))).collect();
            write_transition_csv(File::create(&path)?, mats.iter().map(|(g, m)| (g, m)))?;
            written.push(path);
        }
        BuiltModel::Mlp(_) => {}
    }
    Ok(written)
}

/// Grid search over the configured grid; writes the grid table and a run
/// record for the winning configuration.
pub fn gridsearch(cfg: ExperimentConfig, base: &Path) -> CliResult<(RunRecord, PathBuf)> {
    if cfg.model.kind == ModelKind::MlpLme {
        return Err(CliError::config("model.kind: grid search needs model mlp or crf"));
    }
    let data = prepare(&cfg, base)?;
    let result = run_grid(&cfg.model, &cfg.grid, &data.train, &data.val, &cfg.train)?;
    let (model, _) = result.best_spec.build(
        data.train.task(),
        data.train.feature_dim(),
        data.train.groups(),
        result.best_config.mode,
        result.best_config.seed,
    )?;
    let test = model.evaluate(&result.best_fit.best.bank, &data.test, cfg.metric, cfg.test_min_observations)?;
    let dir = run_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{}.grid.csv", cfg.run_id())))?;
    w.write_record(["learning_rate", "hidden_layers", "width", "weight_decay", "parameters", "val_metric", "error"])?;
    for r in &result.rows {
        w.write_record([
            r.point.learning_rate.to_string(),
            r.point.hidden_layers.to_string(),
            r.point.width.to_string(),
            r.point.weight_decay.to_string(),
            r.parameter_count.to_string(),
            r.val_metric.map(|v| v.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut resolved = cfg.clone();
    resolved.model = result.best_spec.clone();
    resolved.train = result.best_config.clone();
    let record = RunRecord {
        run_id: cfg.run_id(),
        created_at: created_at(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.seed,
        config: resolved,
        data: data.summary,
        normalization: data.norm,
        model,
        fit: result.best_fit,
        lme_head: None,
        test,
        notes: vec![format!("selected grid row {} of {}", result.best + 1, result.rows.len())],
    };
    let path = record.save(&dir)?;
    record.test.write_csv(File::create(dir.join(format!("{}.test_metrics.csv", record.run_id)))?)?;
    Ok((record, path))
}

/// Writes `ds` as CSV with columns `group[,sequence],t,x0..,label`.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let features: Vec<String> = (0..ds.feature_dim()).map(|j| format!("x{j}")).collect();
    match ds.records() {
        Records::Points(obs) => {
            let mut header = vec!["group".to_string(), "t".to_string()];
            header.extend(features);
            header.push("label".into());
            w.write_record(&header)?;
            for o in obs {
                let mut row = vec![o.group.to_string(), o.t.to_string()];
                row.extend(o.features.iter().map(f64::to_string));
                row.push(match o.label {
                    nme_core::dataset::Target::Real(v) => v.to_string(),
                    nme_core::dataset::Target::Class(k) => k.to_string(),
                });
                w.write_record(&row)?;
            }
        }
        Records::Sequences(seqs) => {
            let mut header = vec!["group".to_string(), "sequence".to_string(), "t".to_string()];
            header.extend(features);
            header.push("label".into());
            w.write_record(&header)?;
            for s in seqs {
                for (i, st) in s.steps.iter().enumerate() {
                    let mut row = vec![s.group.to_string(), s.sequence_id.to_string(), (s.t + i as i64).to_string()];
                    row.extend(st.features.iter().map(f64::to_string));
                    row.push(st.state.to_string());
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Emits `<stem>.csv` and `<stem>.truth.json` for a synthetic spec file.
pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<(PathBuf, PathBuf)> {
    let mut spec: SynthSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.set_seed(s);
    }
    let (ds, truth) = spec.generate()?;
    fs::create_dir_all(out)?;
    let stem = spec_path.file_stem().and_then(|s| s.to_str()).unwrap_or("synth");
    let csv_path = out.join(format!("{stem}.csv"));
    write_dataset_csv(&ds, File::create(&csv_path)?)?;
    let truth_path = out.join(format!("{stem}.truth.json"));
    fs::write(&truth_path, serde_json::to_string_pretty(&truth).map_err(|e| CliError::Io(e.to_string()))?)?;
    Ok((csv_path, truth_path))
}
