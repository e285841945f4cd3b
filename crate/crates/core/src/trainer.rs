//! The training loop: mini-batch updates of the penalized objective,
//! epoch-boundary σ² and Σ updates, validation-based early stopping, the
//! ablation modes, data-fraction curves and grid search.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{CrfConfig, CrfModel};
use crate::dataset::{take_group_fraction, Dataset, GroupId, SequenceObservation, TaskKind};
use crate::error::{NmeError, Result};
use crate::math::mean;
use crate::metrics::{per_group_report, EvalReport, GroupPredictions, MetricKind, MIN_GROUP_OBSERVATIONS};
use crate::mlp::{Activation, Mlp, MlpConfig, OutputKind, Placement};
use crate::objective::{batch_gradient, group_sizes, mean_loss, MixedModel, ObjectiveOptions};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{MixedParameterBank, NmeState, ParamValues, Snapshot, TensorHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Penalized deltas with σ²/Σ updates.
    #[default]
    Nme,
    /// No group-specific parameters.
    Generic,
    /// Mixed tensors hold group-specific values only, trained on the loss.
    Specific,
    /// Deltas without the penalty.
    Unme,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Nme => "nme",
            TrainMode::Generic => "generic",
            TrainMode::Specific => "specific",
            TrainMode::Unme => "unme",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// L2 weight decay on the generic parameters.
    pub weight_decay: f64,
    /// Epochs before the first Σ update.
    pub burn_in_epochs: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Validation metric used for model selection.
    pub metric: MetricKind,
    /// Minimum validation observations for a group to be scored.
    pub min_eval_observations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Nme,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 500,
            patience: 10,
            weight_decay: 0.0,
            burn_in_epochs: 1,
            seed: 0,
            deterministic: true,
            metric: MetricKind::Nrmse,
            min_eval_observations: MIN_GROUP_OBSERVATIONS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NmeError::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(NmeError::invalid("batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(NmeError::invalid("patience must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(NmeError::invalid("max_epochs must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(NmeError::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            penalize: self.mode == TrainMode::Nme,
            deterministic: self.deterministic,
        }
    }
}

/// A mixed model that can be trained on and evaluated against a dataset.
pub trait Trainable: MixedModel {
    fn examples(ds: &Dataset) -> Result<&[Self::Example]>;

    /// Appends predictions and truths of `items` (all from one group).
    fn predict_into(&self, params: &ParamValues, items: &[&Self::Example], out: &mut GroupPredictions) -> Result<()>;
}

impl Trainable for Mlp {
    fn examples(ds: &Dataset) -> Result<&[Self::Example]> {
        if ds.is_sequence() {
            return Err(NmeError::invalid("an MLP needs point observations"));
        }
        Ok(ds.observations())
    }

    fn predict_into(&self, params: &ParamValues, items: &[&Self::Example], out: &mut GroupPredictions) -> Result<()> {
        for o in items {
            let y = self.forward(params, &o.features)?;
            let pred = match self.config.output {
                OutputKind::Regression => y[0],
                OutputKind::Classes { .. } => argmax(&y) as f64,
            };
            out.pred.push(pred);
            out.truth.push(o.label.value());
        }
        Ok(())
    }
}

impl Trainable for CrfModel {
    fn examples(ds: &Dataset) -> Result<&[SequenceObservation]> {
        if !ds.is_sequence() {
            return Err(NmeError::invalid("a CRF needs sequence observations"));
        }
        Ok(ds.sequences())
    }

    fn predict_into(&self, params: &ParamValues, items: &[&SequenceObservation], out: &mut GroupPredictions) -> Result<()> {
        for s in items {
            let features: Vec<Vec<f64>> = s.steps.iter().map(|st| st.features.clone()).collect();
            let path = self.viterbi(params, &features)?;
            out.pred.extend(path.iter().map(|&p| p as f64));
            out.truth.extend(s.states().iter().map(|&p| p as f64));
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predictions per group; groups unknown to the bank use generic parameters.
pub fn predictions<M: Trainable>(
    model: &M,
    bank: &MixedParameterBank,
    ds: &Dataset,
) -> Result<BTreeMap<GroupId, GroupPredictions>> {
    let mut by_group: BTreeMap<&GroupId, Vec<&M::Example>> = BTreeMap::new();
    for ex in M::examples(ds)? {
        by_group.entry(model.group_of(ex)).or_default().push(ex);
    }
    let parts: Vec<(&GroupId, Vec<&M::Example>)> = by_group.into_iter().collect();
    let preds = parts
        .par_iter()
        .map(|(g, items)| {
            let params = bank.effective_params(g);
            let mut out = GroupPredictions::default();
            model.predict_into(&params, items, &mut out)?;
            Ok(((*g).clone(), out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(preds.into_iter().collect())
}

pub fn evaluate<M: Trainable>(
    model: &M,
    bank: &MixedParameterBank,
    ds: &Dataset,
    metric: MetricKind,
    min_observations: usize,
) -> Result<EvalReport> {
    per_group_report(metric, &predictions(model, bank, ds)?, min_observations)
}

/// Everything needed to train from a given epoch onward.
pub struct TrainingRun<'a, M: Trainable> {
    pub model: &'a M,
    pub bank: MixedParameterBank,
    pub state: NmeState,
    pub optimizer: Optimizer,
    rng: ChaCha8Rng,
    sizes: Vec<usize>,
    config: TrainConfig,
}

impl<'a, M: Trainable> TrainingRun<'a, M> {
    /// Prepares the bank for the configured mode and sets up the optimizer.
    /// Groups must match the training groups the bank was built with.
    pub fn new(model: &'a M, mut bank: MixedParameterBank, train: &[M::Example], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, config.weight_decay, &bank);
        match config.mode {
            TrainMode::Generic => {
                bank.zero_deltas();
                optimizer.freeze_deltas();
            }
            TrainMode::Specific => {
                // θ = θ^i on mixed tensors: the generic part is fixed at 0
                // and each group starts from the shared initialization.
                for t in 0..bank.tensors().len() {
                    let h = TensorHandle(t);
                    if !bank.tensor(h).mixed {
                        continue;
                    }
                    let init = bank.generic(h).to_vec();
                    for g in 0..bank.groups().len() {
                        bank.tensor_delta_mut(g, h).expect("mixed").copy_from_slice(&init);
                    }
                    bank.generic_mut(h).iter_mut().for_each(|v| *v = 0.0);
                    optimizer.freeze(h);
                }
            }
            TrainMode::Nme | TrainMode::Unme => {}
        }
        bank.start_training();
        let sizes = group_sizes(model, &bank, train);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainingRun {
            model,
            state: NmeState::new(bank.mixed_dim()),
            bank,
            optimizer,
            rng,
            sizes,
            config: config.clone(),
        })
    }

    /// One shuffled pass over `train`; returns the mean downstream loss of
    /// the batches as they were evaluated.
    pub fn train_epoch(&mut self, train: &[M::Example], epoch: usize) -> Result<f64> {
        if train.is_empty() {
            return Err(NmeError::invalid("empty training set"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let opts = self.config.objective_options();
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train[i]).collect();
            let grad = batch_gradient(self.model, &self.bank, &self.state, &batch, &self.sizes, opts)
                .map_err(|e| locate(e, epoch, b))?;
            if !grad.objective.is_finite() {
                return Err(NmeError::non_finite(format!("epoch {epoch}, batch {b}: objective {}", grad.objective)));
            }
            self.optimizer.step(&mut self.bank, &grad);
            total += grad.data_loss;
        }
        Ok(total / train.len() as f64)
    }

    /// σ² from the mean training loss and, after burn-in, Σ from the deltas.
    /// Returns the recomputed mean loss.
    pub fn end_epoch(&mut self, train: &[M::Example], epoch: usize) -> Result<f64> {
        let avg = mean_loss(self.model, &self.bank, train).map_err(|e| locate_epoch(e, epoch))?;
        self.state.update_sigma2(avg).map_err(|e| locate_epoch(e, epoch))?;
        if self.config.mode == TrainMode::Nme && epoch + 1 >= self.config.burn_in_epochs && self.bank.groups().len() >= 2 {
            self.state.update_sigma_diag(self.bank.all_deltas())?;
        }
        Ok(avg)
    }
}

fn locate(e: NmeError, epoch: usize, batch: usize) -> NmeError {
    match e {
        NmeError::NonFinite(m) => NmeError::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

fn locate_epoch(e: NmeError, epoch: usize) -> NmeError {
    match e {
        NmeError::NonFinite(m) => NmeError::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub best: Snapshot,
    /// Zero-based epoch of the best validation metric.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metric: MetricKind,
    /// Mean training loss after each epoch.
    pub train_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Mean delta norm across groups.
    pub mean_delta_norm: Vec<f64>,
}

impl FitResult {
    pub fn best_val_metric(&self) -> f64 {
        self.val_metric[self.best_epoch]
    }
}

/// Trains until the validation metric stops improving for `patience`
/// epochs or `max_epochs` is reached, and returns the best snapshot.
pub fn fit<M: Trainable>(
    model: &M,
    bank: MixedParameterBank,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<FitResult> {
    let examples = M::examples(train)?;
    M::examples(val)?;
    let mut run = TrainingRun::new(model, bank, examples, config)?;
    let mut result = FitResult {
        best: Snapshot {
            bank: run.bank.clone(),
            state: run.state.clone(),
        },
        best_epoch: 0,
        epochs_run: 0,
        metric: config.metric,
        train_loss: Vec::new(),
        val_metric: Vec::new(),
        sigma2: Vec::new(),
        mean_delta_norm: Vec::new(),
    };
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        run.train_epoch(examples, epoch)?;
        let avg = run.end_epoch(examples, epoch)?;
        let report = evaluate(model, &run.bank, val, config.metric, config.min_eval_observations)?;
        let score = report.aggregate;
        if !score.is_finite() {
            return Err(NmeError::non_finite(format!("epoch {epoch}: validation {}", config.metric.name())));
        }
        result.train_loss.push(avg);
        result.sigma2.push(run.state.sigma2);
        result.val_metric.push(score);
        let norms: Vec<f64> = run.bank.delta_norms().into_values().collect();
        result.mean_delta_norm.push(if norms.is_empty() { 0.0 } else { mean(&norms) });
        result.epochs_run = epoch + 1;

        if epoch == 0 || config.metric.better(score, result.val_metric[result.best_epoch]) {
            result.best_epoch = epoch;
            result.best = Snapshot {
                bank: run.bank.clone(),
                state: run.state.clone(),
            };
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(result)
}

/// Model family and architecture; the mode decides whether deltas exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub placement: Placement,
    #[serde(default)]
    pub mask_self_transitions: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Crf,
    /// Generic MLP feature extractor with an LME head on its last hidden layer.
    MlpLme,
}

/// A model registered in its bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BuiltModel {
    Mlp(Mlp),
    Crf(CrfModel),
}

impl ModelSpec {
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        match (self.kind, task) {
            (ModelKind::Crf, TaskKind::Sequence { .. }) => Ok(()),
            (ModelKind::Crf, _) => Err(NmeError::invalid("model crf needs a sequence dataset")),
            (_, TaskKind::Sequence { .. }) => Err(NmeError::invalid("sequence datasets need model crf")),
            (ModelKind::MlpLme, TaskKind::Multiclass { .. }) => {
                Err(NmeError::invalid("model mlp_lme supports regression only"))
            }
            (ModelKind::MlpLme, _) if self.hidden.is_empty() => {
                Err(NmeError::invalid("model mlp_lme needs at least one hidden layer"))
            }
            (_, _) if self.placement == Placement::LastAndTransitions => {
                Err(NmeError::invalid("placement last+T is only valid for model crf"))
            }
            _ => Ok(()),
        }
    }

    /// Registers the model for `groups`. Generic mode and the LME feature
    /// extractor get no mixed tensors.
    pub fn build(
        &self,
        task: TaskKind,
        feature_dim: usize,
        groups: Vec<GroupId>,
        mode: TrainMode,
        seed: u64,
    ) -> Result<(BuiltModel, MixedParameterBank)> {
        self.validate(task)?;
        let placement = if mode == TrainMode::Generic || self.kind == ModelKind::MlpLme {
            Placement::None
        } else {
            self.placement
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = MixedParameterBank::new(groups);
        let output = match task {
            TaskKind::Regression => OutputKind::Regression,
            TaskKind::Multiclass { classes } => OutputKind::Classes { k: classes },
            TaskKind::Sequence { states } => OutputKind::Classes { k: states },
        };
        let emission = MlpConfig::new(feature_dim, &self.hidden, output, self.activation, placement);
        let model = match self.kind {
            ModelKind::Mlp | ModelKind::MlpLme => BuiltModel::Mlp(Mlp::register(emission, &mut bank, "", &mut rng)?),
            ModelKind::Crf => BuiltModel::Crf(CrfModel::register(
                CrfConfig {
                    emission,
                    mix_transitions: placement.mixes_transitions(),
                    mask_self_transitions: self.mask_self_transitions,
                },
                &mut bank,
                &mut rng,
            )?),
        };
        Ok((model, bank))
    }
}

impl BuiltModel {
    pub fn fit(&self, bank: MixedParameterBank, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<FitResult> {
        match self {
            BuiltModel::Mlp(m) => fit(m, bank, train, val, config),
            BuiltModel::Crf(m) => fit(m, bank, train, val, config),
        }
    }

    pub fn predictions(&self, bank: &MixedParameterBank, ds: &Dataset) -> Result<BTreeMap<GroupId, GroupPredictions>> {
        match self {
            BuiltModel::Mlp(m) => predictions(m, bank, ds),
            BuiltModel::Crf(m) => predictions(m, bank, ds),
        }
    }

    pub fn evaluate(&self, bank: &MixedParameterBank, ds: &Dataset, metric: MetricKind, min_obs: usize) -> Result<EvalReport> {
        per_group_report(metric, &self.predictions(bank, ds)?, min_obs)
    }
}

/// Builds, fits and scores one model on `test`.
pub fn fit_and_evaluate(
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    test_min_observations: usize,
) -> Result<(BuiltModel, FitResult, EvalReport)> {
    let (model, bank) = spec.build(train.task(), train.feature_dim(), train.groups(), config.mode, config.seed)?;
    let result = model.fit(bank, train, val, config)?;
    let report = model.evaluate(&result.best.bank, test, config.metric, test_min_observations)?;
    Ok((model, result, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub mode: TrainMode,
    pub fraction: f64,
    /// Test metric aggregate.
    pub metric: f64,
    pub group_count: usize,
    /// Groups left without training data at this fraction.
    pub excluded_groups: Vec<GroupId>,
    pub report: EvalReport,
}

/// Fits every mode on each group's earliest `fraction` of training data and
/// scores it on the test groups that still have training data. Rows are
/// ordered by fraction, then mode.
pub fn data_fraction_curve(
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    fractions: &[f64],
    modes: &[TrainMode],
    config: &TrainConfig,
    test_min_observations: usize,
) -> Result<Vec<FractionRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(NmeError::invalid(format!("fraction {f} outside (0, 1]")));
    }
    let cells: Vec<(f64, TrainMode)> = fractions.iter().flat_map(|&f| modes.iter().map(move |&m| (f, m))).collect();
    cells
        .par_iter()
        .map(|&(fraction, mode)| {
            let (subset, excluded) = take_group_fraction(train, fraction)?;
            let keep = |g: &GroupId| !excluded.contains(g);
            let val = val.retain_groups(keep);
            let test = test.retain_groups(keep);
            let cfg = TrainConfig { mode, ..config.clone() };
            let (_, _, report) = fit_and_evaluate(spec, &subset, &val, &test, &cfg, test_min_observations)?;
            Ok(FractionRow {
                mode,
                fraction,
                metric: report.aggregate,
                group_count: report.group_count,
                excluded_groups: excluded,
                report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub hidden_layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub weight_decays: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            learning_rates: vec![1e-3, 1e-4],
            hidden_layers: vec![1, 2],
            widths: vec![32, 128],
            weight_decays: vec![0.0, 1e-4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub hidden_layers: usize,
    pub width: usize,
    pub weight_decay: f64,
}

impl GridSpec {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &hidden_layers in &self.hidden_layers {
                for &width in &self.widths {
                    for &weight_decay in &self.weight_decays {
                        out.push(GridPoint {
                            learning_rate,
                            hidden_layers,
                            width,
                            weight_decay,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub parameter_count: usize,
    /// Best validation metric, absent when the fit failed.
    pub val_metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_spec: ModelSpec,
    pub best_config: TrainConfig,
    pub best_fit: FitResult,
}

/// Fits every grid point and keeps the best validation metric; ties go to
/// fewer parameters, then the lower learning rate. Failed fits are recorded
/// and never selected.
pub fn gridsearch(
    spec: &ModelSpec,
    grid: &GridSpec,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<GridResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(NmeError::invalid("empty grid"));
    }
    let cell = |p: &GridPoint| -> Result<(ModelSpec, TrainConfig, usize, Result<FitResult>)> {
        let s = ModelSpec {
            hidden: vec![p.width; p.hidden_layers],
            ..spec.clone()
        };
        let cfg = TrainConfig {
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            ..config.clone()
        };
        let (model, bank) = s.build(train.task(), train.feature_dim(), train.groups(), cfg.mode, cfg.seed)?;
        let count = bank.generic_len() + bank.mixed_dim() * bank.groups().len();
        let fit = model.fit(bank, train, val, &cfg);
        Ok((s, cfg, count, fit))
    };
    let outcomes = points.par_iter().map(cell).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<usize> = None;
    for (i, (p, (_, _, count, fit))) in points.iter().zip(&outcomes).enumerate() {
        let (val_metric, error) = match fit {
            Ok(f) => (Some(f.best_val_metric()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(GridRow {
            point: *p,
            parameter_count: *count,
            val_metric,
            error,
        });
        if let Some(v) = val_metric {
            let wins = match best {
                None => true,
                Some(b) => {
                    let bv = rows[b].val_metric.expect("selected rows succeeded");
                    config.metric.better(v, bv)
                        || (v == bv
                            && (*count, p.learning_rate) < (rows[b].parameter_count, rows[b].point.learning_rate))
                }
            };
            if wins {
                best = Some(i);
            }
        }
    }
    let best = best.ok_or_else(|| NmeError::non_finite("every grid point failed"))?;
    let (best_spec, best_config, _, fit) = outcomes.into_iter().nth(best).expect("index in range");
    Ok(GridResult {
        rows,
        best,
        best_spec,
        best_config,
        best_fit: fit.expect("selected fit succeeded"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synth_linear_mixed, CountSpec, LinearSynthSpec, SynthCommon};
    use crate::dataset::{split_within_group, Observation, SplitFractions, Target};
    use crate::math::spearman;
    use crate::objective::batch_objective;

    fn linear_data(groups: usize, n: usize, intercept_variance: f64, seed: u64) -> Dataset {
        let spec = LinearSynthSpec {
            common: SynthCommon {
                groups,
                observations: CountSpec::Fixed(n),
                feature_dim: 2,
                noise_std: 0.3,
                seed,
            },
            slopes: vec![1.0, -0.5],
            intercept: 0.5,
            slope_variances: vec![0.0, 0.0],
            intercept_variance,
        };
        synth_linear_mixed(&spec).unwrap().0
    }

    fn linear_spec(placement: Placement) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp,
            hidden: vec![],
            activation: Activation::Tanh,
            placement,
            mask_self_transitions: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn single_sgd_step_matches_hand_computation() {
        let ds = Dataset::from_observations(
            TaskKind::Regression,
            1,
            vec![Observation {
                group: "a".into(),
                t: 0,
                features: vec![2.0],
                label: Target::Real(1.0),
            }],
        )
        .unwrap();
        let (model, mut bank) = linear_spec(Placement::Last)
            .build(TaskKind::Regression, 1, ds.groups(), TrainMode::Nme, 0)
            .unwrap();
        let BuiltModel::Mlp(mlp) = model else { unreachable!() };
        let (w, b) = (mlp.weights[0], mlp.biases[0]);
        bank.generic_mut(w)[0] = 0.5;
        bank.generic_mut(b)[0] = 0.25;
        bank.tensor_delta_mut(0, w).unwrap()[0] = 0.1;
        bank.tensor_delta_mut(0, b).unwrap()[0] = -0.2;
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            batch_size: 1,
            ..Default::default()
        };
        let mut run = TrainingRun::new(&mlp, bank, ds.observations(), &cfg).unwrap();
        run.train_epoch(ds.observations(), 0).unwrap();
        // pred = (0.5 + 0.1) * 2 + (0.25 - 0.2) = 1.25, dl/dpred = 2 * 0.25 = 0.5
        // sigma2 = 1, Sigma = 1, scale = 1/1, penalty grad = 2 * delta
        let bank = &run.bank;
        assert!((bank.generic(w)[0] - (0.5 - 0.1 * 1.0)).abs() < 1e-10);
        assert!((bank.generic(b)[0] - (0.25 - 0.1 * 0.5)).abs() < 1e-10);
        assert!((bank.tensor_delta(0, w).unwrap()[0] - (0.1 - 0.1 * (1.0 + 0.2))).abs() < 1e-10);
        assert!((bank.tensor_delta(0, b).unwrap()[0] - (-0.2 - 0.1 * (0.5 - 0.4))).abs() < 1e-10);
    }

    #[test]
    fn unme_step_ignores_penalty() {
        let ds = Dataset::from_observations(
            TaskKind::Regression,
            1,
            vec![Observation {
                group: "a".into(),
                t: 0,
                features: vec![0.0],
                label: Target::Real(0.0),
            }],
        )
        .unwrap();
        let (model, mut bank) = linear_spec(Placement::Last)
            .build(TaskKind::Regression, 1, ds.groups(), TrainMode::Unme, 0)
            .unwrap();
        let BuiltModel::Mlp(mlp) = model else { unreachable!() };
        let b = mlp.biases[0];
        bank.tensor_delta_mut(0, mlp.weights[0]).unwrap()[0] = 3.0;
        let cfg = TrainConfig {
            mode: TrainMode::Unme,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            batch_size: 1,
            ..Default::default()
        };
        let mut run = TrainingRun::new(&mlp, bank, ds.observations(), &cfg).unwrap();
        run.train_epoch(ds.observations(), 0).unwrap();
        // x = 0 and zero prediction error: only a penalty could move the weight delta
        assert_eq!(run.bank.tensor_delta(0, mlp.weights[0]).unwrap()[0], 3.0);
        assert_eq!(run.bank.tensor_delta(0, b).unwrap()[0], 0.0);
    }

    #[test]
    fn objective_non_increasing_on_convex_instance() {
        let ds = linear_data(4, 30, 1.0, 3);
        let (model, bank) = linear_spec(Placement::Last)
            .build(TaskKind::Regression, 2, ds.groups(), TrainMode::Nme, 1)
            .unwrap();
        let BuiltModel::Mlp(mlp) = model else { unreachable!() };
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            batch_size: ds.len(),
            ..Default::default()
        };
        let ex = ds.observations();
        let mut run = TrainingRun::new(&mlp, bank, ex, &cfg).unwrap();
        let refs: Vec<&Observation> = ex.iter().collect();
        let obj = |r: &TrainingRun<Mlp>| batch_objective(&mlp, &r.bank, &r.state, &refs, &r.sizes, cfg.objective_options()).unwrap();
        let mut prev = obj(&run);
        for epoch in 0..50 {
            run.train_epoch(ex, epoch).unwrap();
            let now = obj(&run);
            assert!(now <= prev + 1e-12, "epoch {epoch}: {prev} -> {now}");
            prev = now;
        }
    }

    fn split(ds: &Dataset) -> (Dataset, Dataset, Dataset) {
        split_within_group(ds, SplitFractions::default()).unwrap()
    }

    fn quick_config(mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            learning_rate: 0.02,
            batch_size: 16,
            max_epochs: 60,
            patience: 10,
            seed,
            metric: MetricKind::Mse,
            min_eval_observations: 1,
            ..Default::default()
        }
    }

    #[test]
    fn fit_is_deterministic_and_traces_are_consistent() {
        let ds = linear_data(6, 40, 1.0, 4);
        let (train, val, _) = split(&ds);
        let spec = ModelSpec { hidden: vec![4], ..linear_spec(Placement::Last) };
        let run = || {
            let (m, bank) = spec.build(TaskKind::Regression, 2, train.groups(), TrainMode::Nme, 7).unwrap();
            m.fit(bank, &train, &val, &quick_config(TrainMode::Nme, 7)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.sigma2, a.train_loss);
        assert_eq!(a.train_loss.len(), a.epochs_run);
        let best = a.val_metric.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_metric(), best);
        let (m, _) = spec.build(TaskKind::Regression, 2, train.groups(), TrainMode::Nme, 7).unwrap();
        let BuiltModel::Mlp(mlp) = m else { unreachable!() };
        let recomputed = mean_loss(&mlp, &a.best.bank, train.observations()).unwrap();
        assert!((recomputed - a.sigma2[a.best_epoch]).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_deltas_stay_small() {
        let ds = linear_data(8, 200, 0.0, 5);
        let (train, val, _) = split(&ds);
        let spec = linear_spec(Placement::Last);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 400,
            patience: 400,
            ..quick_config(TrainMode::Nme, 1)
        };
        let (m, bank) = spec.build(TaskKind::Regression, 2, train.groups(), TrainMode::Nme, 1).unwrap();
        let nme = m.fit(bank, &train, &val, &cfg).unwrap();
        let (g, gbank) = spec.build(TaskKind::Regression, 2, train.groups(), TrainMode::Generic, 1).unwrap();
        let generic = g.fit(gbank, &train, &val, &TrainConfig { mode: TrainMode::Generic, ..cfg }).unwrap();
        let generic_norm = crate::math::l2_norm(&nme.best.bank.tensors().iter().flat_map(|t| t.values.clone()).collect::<Vec<_>>());
        let delta = *nme.mean_delta_norm.last().unwrap();
        assert!(delta < 0.1 * generic_norm, "{delta} vs {generic_norm}");
        assert!((nme.best_val_metric() - generic.best_val_metric()).abs() < 0.05);
    }

    #[test]
    fn specific_mode_uses_only_group_values() {
        let ds = linear_data(3, 20, 1.0, 6);
        let (model, bank) = linear_spec(Placement::Last)
            .build(TaskKind::Regression, 2, ds.groups(), TrainMode::Specific, 0)
            .unwrap();
        let BuiltModel::Mlp(mlp) = model else { unreachable!() };
        let init = bank.generic(mlp.weights[0]).to_vec();
        let run = TrainingRun::new(&mlp, bank, ds.observations(), &quick_config(TrainMode::Specific, 0)).unwrap();
        assert!(run.bank.generic(mlp.weights[0]).iter().all(|&v| v == 0.0));
        for g in 0..3 {
            assert_eq!(run.bank.tensor_delta(g, mlp.weights[0]).unwrap(), &init[..]);
        }
    }

    #[test]
    fn zero_deltas_everywhere_match_generic_predictions() {
        let ds = linear_data(3, 20, 1.0, 7);
        let spec = ModelSpec { hidden: vec![5, 3], ..linear_spec(Placement::All) };
        let (nme, mut nbank) = spec.build(TaskKind::Regression, 2, ds.groups(), TrainMode::Nme, 3).unwrap();
        let (gen, gbank) = spec.build(TaskKind::Regression, 2, ds.groups(), TrainMode::Generic, 3).unwrap();
        for g in 0..3 {
            nbank.delta_mut(g).iter_mut().for_each(|v| *v = 0.25);
        }
        let mut state = NmeState::new(nbank.mixed_dim());
        state.update_sigma_diag(&vec![vec![0.0; nbank.mixed_dim()]; 3]).unwrap();
        assert!(state.sigma_diag.iter().all(|&s| s == crate::params::VARIANCE_FLOOR));
        nbank.zero_deltas();
        assert_eq!(nme.predictions(&nbank, &ds).unwrap(), gen.predictions(&gbank, &ds).unwrap());
    }

    #[test]
    fn larger_groups_learn_larger_deltas() {
        let spec = LinearSynthSpec {
            common: SynthCommon {
                groups: 30,
                observations: CountSpec::Cycle(vec![20, 80, 320]),
                feature_dim: 2,
                noise_std: 1.0,
                seed: 8,
            },
            slopes: vec![1.0, -0.5],
            intercept: 0.0,
            slope_variances: vec![0.25, 0.25],
            intercept_variance: 0.25,
        };
        let ds = synth_linear_mixed(&spec).unwrap().0;
        let (train, val, _) = split(&ds);
        let (m, bank) = linear_spec(Placement::Last)
            .build(TaskKind::Regression, 2, train.groups(), TrainMode::Nme, 2)
            .unwrap();
        let res = m.fit(bank, &train, &val, &quick_config(TrainMode::Nme, 2)).unwrap();
        let counts = train.group_counts();
        let norms = res.best.bank.delta_norms();
        let n: Vec<f64> = norms.keys().map(|g| counts[g] as f64).collect();
        let d: Vec<f64> = norms.values().copied().collect();
        assert!(spearman(&n, &d).unwrap() > 0.0);
    }

    #[test]
    fn fraction_one_reproduces_fit() {
        let ds = linear_data(5, 40, 1.0, 9);
        let (train, val, test) = split(&ds);
        let spec = linear_spec(Placement::Last);
        let cfg = quick_config(TrainMode::Nme, 4);
        let rows = data_fraction_curve(&spec, &train, &val, &test, &[1.0], &[TrainMode::Nme, TrainMode::Generic], &cfg, 1).unwrap();
        assert_eq!(rows.len(), 2);
        let (_, _, direct) = fit_and_evaluate(&spec, &train, &val, &test, &cfg, 1).unwrap();
        assert_eq!(rows[0].report, direct);
        assert!(rows[0].excluded_groups.is_empty());
        assert!(data_fraction_curve(&spec, &train, &val, &test, &[0.0], &[TrainMode::Nme], &cfg, 1).is_err());
    }

    #[test]
    fn gridsearch_counts_and_singleton_identity() {
        let ds = linear_data(4, 30, 1.0, 10);
        let (train, val, _) = split(&ds);
        let spec = linear_spec(Placement::Last);
        let cfg = TrainConfig { max_epochs: 5, ..quick_config(TrainMode::Nme, 5) };
        let grid = GridSpec {
            learning_rates: vec![0.01, 0.02],
            hidden_layers: vec![1],
            widths: vec![2, 3],
            weight_decays: vec![0.0],
        };
        let res = gridsearch(&spec, &grid, &train, &val, &cfg).unwrap();
        assert_eq!(res.rows.len(), 4);

        let single = GridSpec {
            learning_rates: vec![0.01],
            hidden_layers: vec![1],
            widths: vec![3],
            weight_decays: vec![0.0],
        };
        let res = gridsearch(&spec, &single, &train, &val, &cfg).unwrap();
        let s = ModelSpec { hidden: vec![3], ..spec };
        let (m, bank) = s.build(TaskKind::Regression, 2, train.groups(), TrainMode::Nme, 5).unwrap();
        let direct = m.fit(bank, &train, &val, &TrainConfig { learning_rate: 0.01, ..cfg }).unwrap();
        assert_eq!(res.best_fit, direct);
    }

    #[test]
    fn gridsearch_skips_diverging_learning_rate() {
        let ds = linear_data(4, 30, 1.0, 11);
        let (train, val, _) = split(&ds);
        let spec = linear_spec(Placement::Last);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            max_epochs: 20,
            ..quick_config(TrainMode::Nme, 6)
        };
        let grid = GridSpec {
            learning_rates: vec![1e3, 0.01],
            hidden_layers: vec![1],
            widths: vec![4],
            weight_decays: vec![0.0],
        };
        let res = gridsearch(&spec, &grid, &train, &val, &cfg).unwrap();
        assert_eq!(res.best, 1);
        match res.rows[0].val_metric {
            None => assert!(res.rows[0].error.is_some()),
            Some(v) => assert!(v > res.rows[1].val_metric.unwrap()),
        }
    }

    #[test]
    fn default_grid_has_sixteen_points() {
        assert_eq!(GridSpec::default().points().len(), 16);
    }

    #[test]
    fn placement_validation() {
        let spec = linear_spec(Placement::LastAndTransitions);
        assert!(spec.validate(TaskKind::Regression).is_err());
        let crf = ModelSpec { kind: ModelKind::Crf, ..spec };
        assert!(crf.validate(TaskKind::Sequence { states: 3 }).is_ok());
        assert!(crf.validate(TaskKind::Regression).is_err());
    }
}
