//! Linear mixed-effects head fit by EM on a frozen representation.
//!
//! Each group's design is `[1, z]`; the fixed effects β and the random
//! effects b_i share that design, with `b_i ~ N(0, D)` for diagonal `D`
//! and residual noise `N(0, s²)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupId};
use crate::error::{NmeError, Result};
use crate::mlp::Mlp;
use crate::params::{MixedParameterBank, VARIANCE_FLOOR};

/// Representation rows and regression labels of one group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmeGroupData {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmeHead {
    /// Representation dimension `h`.
    pub dim: usize,
    /// Fixed effects `[bias, weights...]`.
    pub beta: Vec<f64>,
    /// Random effects per group, same layout as `beta`.
    pub random_effects: BTreeMap<GroupId, Vec<f64>>,
    /// Diagonal of the random-effect covariance.
    pub d_diag: Vec<f64>,
    pub noise_var: f64,
    /// Marginal log-likelihood before each EM iteration, then at the end.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmeOptions {
    pub max_iters: usize,
    /// Stop once the largest absolute parameter change is below this.
    pub tol: f64,
}

impl Default for LmeOptions {
    fn default() -> Self {
        LmeOptions {
            max_iters: 500,
            tol: 1e-8,
        }
    }
}

/// Sufficient statistics of one group under the design `[1, z]`.
struct GroupStats {
    n: usize,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    yty: f64,
}

impl GroupStats {
    fn new(data: &LmeGroupData, dim: usize) -> Result<Self> {
        let q = dim + 1;
        let mut ztz = DMatrix::zeros(q, q);
        let mut zty = DVector::zeros(q);
        let mut yty = 0.0;
        for (row, y) in data.rows.iter().zip(&data.labels) {
            if row.len() != dim {
                return Err(NmeError::DimensionMismatch { expected: dim, got: row.len() });
            }
            let z = design(row);
            ztz += &z * z.transpose();
            zty += &z * *y;
            yty += y * y;
        }
        Ok(GroupStats {
            n: data.labels.len(),
            ztz,
            zty,
            yty,
        })
    }

    /// `Zᵀr` and `rᵀr` for residual `r = y - Z u`.
    fn residual(&self, u: &DVector<f64>) -> (DVector<f64>, f64) {
        let ztr = &self.zty - &self.ztz * u;
        let rtr = self.yty - 2.0 * u.dot(&self.zty) + u.dot(&(&self.ztz * u));
        (ztr, rtr)
    }
}

fn design(row: &[f64]) -> DVector<f64> {
    DVector::from_iterator(row.len() + 1, std::iter::once(1.0).chain(row.iter().copied()))
}

struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_lik: f64,
}

/// E-step for one group, plus its marginal log-likelihood contribution.
fn posterior(stats: &GroupStats, beta: &DVector<f64>, d: &[f64], s2: f64) -> Option<Posterior> {
    let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|v| 1.0 / v)));
    let a = &stats.ztz / s2 + d_inv;
    let chol = a.cholesky()?;
    let (ztr, rtr) = stats.residual(beta);
    let cov = chol.inverse();
    let mean = &cov * &ztr / s2;
    let log_det_a: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_v = stats.n as f64 * s2.ln() + d.iter().map(|v| v.ln()).sum::<f64>() + log_det_a;
    let quad = rtr / s2 - ztr.dot(&mean) / s2;
    let log_lik = -0.5 * (stats.n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_v + quad);
    Some(Posterior { mean, cov, log_lik })
}

fn e_step(stats: &[GroupStats], beta: &DVector<f64>, d: &[f64], s2: f64, iter: usize) -> Result<Vec<Posterior>> {
    let posts: Option<Vec<Posterior>> = stats.par_iter().map(|s| posterior(s, beta, d, s2)).collect();
    let posts = posts.ok_or_else(|| NmeError::non_finite(format!("EM iteration {iter}: posterior precision not positive definite")))?;
    if posts.iter().any(|p| !p.log_lik.is_finite() || p.mean.iter().any(|v| !v.is_finite())) {
        return Err(NmeError::non_finite(format!("EM iteration {iter}: E-step")));
    }
    Ok(posts)
}

/// Fits the head by EM. Groups must be non-empty; the pooled design must
/// have full column rank.
pub fn fit_lme_head(data: &BTreeMap<GroupId, LmeGroupData>, opts: LmeOptions) -> Result<LmeHead> {
    let dim = data
        .values()
        .find_map(|g| g.rows.first().map(Vec::len))
        .ok_or_else(|| NmeError::invalid("LME head needs at least one observation"))?;
    for (g, d) in data {
        if d.rows.is_empty() || d.rows.len() != d.labels.len() {
            return Err(NmeError::invalid(format!(
                "group {g}: {} rows and {} labels",
                d.rows.len(),
                d.labels.len()
            )));
        }
        if d.labels.iter().chain(d.rows.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(NmeError::non_finite(format!("group {g} input")));
        }
    }
    let stats: Vec<GroupStats> = data.values().map(|d| GroupStats::new(d, dim)).collect::<Result<_>>()?;
    let q = dim + 1;
    let total_n: usize = stats.iter().map(|s| s.n).sum();
    let pooled_ztz = stats.iter().fold(DMatrix::zeros(q, q), |acc, s| acc + &s.ztz);
    let pooled_zty = stats.iter().fold(DVector::zeros(q), |acc, s| acc + &s.zty);
    let scale = pooled_ztz.diagonal().max();
    let pooled = pooled_ztz
        .clone()
        .cholesky()
        .filter(|c| c.l().diagonal().iter().all(|v| v * v > 1e-12 * scale))
        .ok_or_else(|| NmeError::invalid("pooled representation matrix is rank deficient"))?;

    let mut beta = pooled.solve(&pooled_zty);
    let rss: f64 = stats.iter().map(|s| s.residual(&beta).1).sum();
    let mut s2 = (rss / total_n as f64).max(VARIANCE_FLOOR);
    let mut d = vec![1.0; q];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        let posts = e_step(&stats, &beta, &d, s2, iter)?;
        trace.push(posts.iter().map(|p| p.log_lik).sum());

        let mut rhs = pooled_zty.clone();
        for (s, p) in stats.iter().zip(&posts) {
            rhs -= &s.ztz * &p.mean;
        }
        let new_beta = pooled.solve(&rhs);
        let m = stats.len() as f64;
        let new_d: Vec<f64> = (0..q)
            .map(|k| (posts.iter().map(|p| p.mean[k].powi(2) + p.cov[(k, k)]).sum::<f64>() / m).max(VARIANCE_FLOOR))
            .collect();
        let sse: f64 = stats
            .iter()
            .zip(&posts)
            .map(|(s, p)| s.residual(&(&new_beta + &p.mean)).1 + (&s.ztz * &p.cov).trace())
            .sum();
        let new_s2 = (sse / total_n as f64).max(VARIANCE_FLOOR);
        if !new_s2.is_finite() || new_beta.iter().chain(&new_d).any(|v| !v.is_finite()) {
            return Err(NmeError::non_finite(format!("EM iteration {iter}: M-step")));
        }

        let change = (&new_beta - &beta)
            .iter()
            .map(|v| v.abs())
            .chain(new_d.iter().zip(&d).map(|(a, b)| (a - b).abs()))
            .fold((new_s2 - s2).abs(), f64::max);
        beta = new_beta;
        d = new_d;
        s2 = new_s2;
        iterations = iter + 1;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let posts = e_step(&stats, &beta, &d, s2, iterations)?;
    trace.push(posts.iter().map(|p| p.log_lik).sum());
    let random_effects = data
        .keys()
        .zip(&posts)
        .map(|(g, p)| (g.clone(), p.mean.iter().copied().collect()))
        .collect();
    Ok(LmeHead {
        dim,
        beta: beta.iter().copied().collect(),
        random_effects,
        d_diag: d,
        noise_var: s2,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

/// `(β + b_g)ᵀ[1, z]`; unknown groups use `b = 0`.
pub fn predict_lme(head: &LmeHead, z: &[f64], group: &GroupId) -> Result<f64> {
    if z.len() != head.dim {
        return Err(NmeError::DimensionMismatch { expected: head.dim, got: z.len() });
    }
    let coef = |k: usize| head.beta[k] + head.random_effects.get(group).map_or(0.0, |b| b[k]);
    Ok(coef(0) + z.iter().enumerate().map(|(k, v)| coef(k + 1) * v).sum::<f64>())
}

/// Last-hidden-layer representations of a regression dataset under the
/// generic parameters of `bank`.
pub fn representations(mlp: &Mlp, bank: &MixedParameterBank, ds: &Dataset) -> Result<BTreeMap<GroupId, LmeGroupData>> {
    let params = bank.effective_params_at(None);
    let mut out: BTreeMap<GroupId, LmeGroupData> = BTreeMap::new();
    for o in ds.observations() {
        let label = o
            .label
            .as_real()
            .ok_or_else(|| NmeError::invalid("the LME head supports regression labels only"))?;
        let entry = out.entry(o.group.clone()).or_default();
        entry.rows.push(mlp.representation(&params, &o.features)?);
        entry.labels.push(label);
    }
    Ok(out)
}
