//! The penalized mini-batch objective shared by every mixed model:
//!
//! `sum_{obs in batch} l / sigma2 + sum_g (count_g / n_g) * delta_g^T Sigma^-1 delta_g`
//!
//! together with its analytic gradient with respect to the generic tensors
//! and each group's flat delta, and a central finite-difference checker.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::GroupId;
use crate::error::{NmeError, Result};
use crate::params::{accumulate_penalty_grad, count_scale, penalty, MixedParameterBank, NmeState, ParamValues};

/// A model whose parameters live in a [`MixedParameterBank`].
pub trait MixedModel: Sync {
    type Example: Sync;

    fn group_of<'a>(&self, example: &'a Self::Example) -> &'a GroupId;

    /// Downstream loss of one example under the given effective parameters.
    fn loss(&self, params: &ParamValues, example: &Self::Example) -> Result<f64>;

    /// Loss of one example; adds d loss / d effective parameters into `grad`.
    fn loss_grad(&self, params: &ParamValues, example: &Self::Example, grad: &mut ParamValues) -> Result<f64>;
}

/// Batches at least this large are evaluated group-parallel.
const PARALLEL_MIN_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    /// Include the scaled Gaussian penalty on the deltas.
    pub penalize: bool,
    /// Reduce per-group terms in a fixed order.
    pub deterministic: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            penalize: true,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub generic: ParamValues,
    /// Flat delta gradient for every bank group with an example in the batch.
    pub deltas: BTreeMap<usize, Vec<f64>>,
    /// Sum of downstream losses (unscaled).
    pub data_loss: f64,
    pub objective: f64,
}

struct GroupTerm {
    group: Option<usize>,
    generic: ParamValues,
    delta: Option<Vec<f64>>,
    data_loss: f64,
    objective: f64,
}

/// Training observation count per bank group index.
pub fn group_sizes<M: MixedModel>(model: &M, bank: &MixedParameterBank, examples: &[M::Example]) -> Vec<usize> {
    let mut sizes = vec![0; bank.groups().len()];
    for ex in examples {
        if let Some(g) = bank.group_index(model.group_of(ex)) {
            sizes[g] += 1;
        }
    }
    sizes
}

fn split_by_group<'a, M: MixedModel>(
    model: &M,
    bank: &MixedParameterBank,
    batch: &[&'a M::Example],
) -> Vec<(Option<usize>, Vec<&'a M::Example>)> {
    let mut by_group: BTreeMap<Option<usize>, Vec<&M::Example>> = BTreeMap::new();
    for ex in batch {
        by_group.entry(bank.group_index(model.group_of(ex))).or_default().push(*ex);
    }
    by_group.into_iter().collect()
}

fn group_term<M: MixedModel>(
    model: &M,
    bank: &MixedParameterBank,
    state: &NmeState,
    sizes: &[usize],
    opts: ObjectiveOptions,
    group: Option<usize>,
    items: &[&M::Example],
) -> Result<GroupTerm> {
    let params = bank.effective_params_at(group);
    let mut grad = ParamValues::zeros_like(bank);
    let mut data_loss = 0.0;
    for ex in items {
        data_loss += model.loss_grad(&params, ex, &mut grad)?;
    }
    let inv = 1.0 / state.sigma2;
    for v in &mut grad.0 {
        v.iter_mut().for_each(|x| *x *= inv);
    }
    let mut objective = data_loss * inv;
    let delta = group.map(|g| {
        let mut d = vec![0.0; bank.mixed_dim()];
        for (t, tg) in bank.tensors().iter().zip(&grad.0) {
            if let Some(off) = t.offset() {
                d[off..off + t.len()].copy_from_slice(tg);
            }
        }
        if opts.penalize && bank.mixed_dim() > 0 {
            let scale = count_scale(items.len(), sizes[g]);
            objective += scale * penalty(bank.delta(g), state);
            accumulate_penalty_grad(bank.delta(g), state, scale, &mut d);
        }
        d
    });
    Ok(GroupTerm {
        group,
        generic: grad,
        delta,
        data_loss,
        objective,
    })
}

fn merge(bank: &MixedParameterBank, terms: impl IntoIterator<Item = GroupTerm>) -> BatchGradient {
    let mut out = BatchGradient {
        generic: ParamValues::zeros_like(bank),
        deltas: BTreeMap::new(),
        data_loss: 0.0,
        objective: 0.0,
    };
    for t in terms {
        out.generic.add_scaled(&t.generic, 1.0);
        out.data_loss += t.data_loss;
        out.objective += t.objective;
        if let (Some(g), Some(d)) = (t.group, t.delta) {
            out.deltas.insert(g, d);
        }
    }
    out
}

/// Objective value and gradient of one mini-batch.
///
/// `sizes[g]` is the number of training observations of bank group `g`.
pub fn batch_gradient<M: MixedModel>(
    model: &M,
    bank: &MixedParameterBank,
    state: &NmeState,
    batch: &[&M::Example],
    sizes: &[usize],
    opts: ObjectiveOptions,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(NmeError::invalid("empty batch"));
    }
    let parts = split_by_group(model, bank, batch);
    let run = |(g, items): &(Option<usize>, Vec<&M::Example>)| group_term(model, bank, state, sizes, opts, *g, items);
    if batch.len() < PARALLEL_MIN_BATCH {
        let terms = parts.iter().map(run).collect::<Result<Vec<_>>>()?;
        return Ok(merge(bank, terms));
    }
    if opts.deterministic {
        let terms = parts.par_iter().map(run).collect::<Result<Vec<_>>>()?;
        Ok(merge(bank, terms))
    } else {
        parts
            .par_iter()
            .map(|p| run(p).map(|t| merge(bank, [t])))
            .try_reduce_with(|mut a, b| {
                a.generic.add_scaled(&b.generic, 1.0);
                a.data_loss += b.data_loss;
                a.objective += b.objective;
                a.deltas.extend(b.deltas);
                Ok(a)
            })
            .expect("non-empty batch")
    }
}

/// Objective value only.
pub fn batch_objective<M: MixedModel>(
    model: &M,
    bank: &MixedParameterBank,
    state: &NmeState,
    batch: &[&M::Example],
    sizes: &[usize],
    opts: ObjectiveOptions,
) -> Result<f64> {
    let mut total = 0.0;
    for (g, items) in split_by_group(model, bank, batch) {
        let params = bank.effective_params_at(g);
        let mut data = 0.0;
        for ex in &items {
            data += model.loss(&params, ex)?;
        }
        total += data / state.sigma2;
        if let (Some(g), true) = (g, opts.penalize) {
            total += count_scale(items.len(), sizes[g]) * penalty(bank.delta(g), state);
        }
    }
    Ok(total)
}

/// Mean downstream loss over `examples` with the current parameters.
pub fn mean_loss<M: MixedModel>(model: &M, bank: &MixedParameterBank, examples: &[M::Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(NmeError::invalid("mean loss of an empty set"));
    }
    let refs: Vec<&M::Example> = examples.iter().collect();
    let parts = split_by_group(model, bank, &refs);
    let sums = parts
        .par_iter()
        .map(|(g, items)| {
            let params = bank.effective_params_at(*g);
            items.iter().map(|ex| model.loss(&params, ex)).sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / examples.len() as f64)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`finite_diff_check`]; below it errors are absolute.
pub const FD_FLOOR: f64 = 1e-6;

/// Perturbs every generic scalar and every delta scalar of every group by
/// `±h` and returns the worst relative error between the central difference
/// of the batch objective and the analytic gradient.
pub fn finite_diff_check<M: MixedModel>(
    model: &M,
    bank: &MixedParameterBank,
    state: &NmeState,
    batch: &[&M::Example],
    sizes: &[usize],
    opts: ObjectiveOptions,
    h: f64,
) -> Result<f64> {
    let analytic = batch_gradient(model, bank, state, batch, sizes, opts)?;
    let mut work = bank.clone();
    let mut worst: f64 = 0.0;
    let eval = |b: &MixedParameterBank| batch_objective(model, b, state, batch, sizes, opts);

    for t in 0..bank.tensors().len() {
        let h_t = crate::params::TensorHandle(t);
        for e in 0..bank.tensor(h_t).len() {
            let orig = work.generic(h_t)[e];
            work.generic_mut(h_t)[e] = orig + h;
            let plus = eval(&work)?;
            work.generic_mut(h_t)[e] = orig - h;
            let minus = eval(&work)?;
            work.generic_mut(h_t)[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.generic[h_t][e], numeric, FD_FLOOR));
        }
    }
    for g in 0..bank.groups().len() {
        for k in 0..bank.mixed_dim() {
            let orig = work.delta(g)[k];
            work.delta_mut(g)[k] = orig + h;
            let plus = eval(&work)?;
            work.delta_mut(g)[k] = orig - h;
            let minus = eval(&work)?;
            work.delta_mut(g)[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.deltas.get(&g).map_or(0.0, |d| d[k]);
            worst = worst.max(relative_error(a, numeric, FD_FLOOR));
        }
    }
    Ok(worst)
}
