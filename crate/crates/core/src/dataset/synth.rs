//! Seeded generators of grouped data with known per-group parameters.
//!
//! Every generator is a pure function of its spec: the same spec (seed
//! included) produces an identical dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, GroupId, Observation, SequenceObservation, Step, Target, TaskKind};
use crate::error::{NmeError, Result};

/// How many items (observations, sequences, steps) to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSpec {
    Fixed(usize),
    /// Uniform on `min..=max`, drawn per item.
    Range { min: usize, max: usize },
    /// Item `i` gets `values[i % values.len()]`.
    Cycle(Vec<usize>),
}

impl CountSpec {
    fn validate(&self, what: &str) -> Result<()> {
        match self {
            CountSpec::Fixed(_) => Ok(()),
            CountSpec::Range { min, max } if min <= max => Ok(()),
            CountSpec::Cycle(v) if !v.is_empty() => Ok(()),
            _ => Err(NmeError::invalid(format!("invalid count spec for {what}"))),
        }
    }

    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> usize {
        match self {
            CountSpec::Fixed(n) => *n,
            CountSpec::Range { min, max } => rng.random_range(*min..=*max),
            CountSpec::Cycle(v) => v[index % v.len()],
        }
    }
}

/// Settings shared by the point-data generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCommon {
    pub groups: usize,
    pub observations: CountSpec,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthCommon {
    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.feature_dim == 0 {
            return Err(NmeError::invalid("groups and feature_dim must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(NmeError::invalid("noise_std must be >= 0"));
        }
        self.observations.validate("observations")
    }
}

pub fn group_name(i: usize) -> GroupId {
    GroupId::new(format!("g{i:04}")).expect("non-empty")
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| NmeError::invalid(format!("bad standard deviation {std}: {e}")))
}

fn std_of(variance: f64, what: &str) -> Result<f64> {
    if !(variance >= 0.0) {
        return Err(NmeError::invalid(format!("{what} variance must be >= 0")));
    }
    Ok(variance.sqrt())
}

/// `y = (slopes + b_i)·x + (intercept + a_i) + noise` with `x ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSynthSpec {
    pub common: SynthCommon,
    pub slopes: Vec<f64>,
    pub intercept: f64,
    /// Diagonal variances of the per-group slope effects.
    pub slope_variances: Vec<f64>,
    pub intercept_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTruth {
    pub groups: Vec<GroupId>,
    pub slope_effects: Vec<Vec<f64>>,
    pub intercept_effects: Vec<f64>,
}

pub fn synth_linear_mixed(spec: &LinearSynthSpec) -> Result<(Dataset, LinearTruth)> {
    let c = &spec.common;
    c.validate()?;
    let d = c.feature_dim;
    if spec.slopes.len() != d || spec.slope_variances.len() != d {
        return Err(NmeError::DimensionMismatch {
            expected: d,
            got: spec.slopes.len().min(spec.slope_variances.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let slope_dists = spec
        .slope_variances
        .iter()
        .map(|&v| std_of(v, "slope").and_then(normal))
        .collect::<Result<Vec<_>>>()?;
    let intercept_dist = normal(std_of(spec.intercept_variance, "intercept")?)?;
    let noise = normal(c.noise_std)?;

    let groups: Vec<GroupId> = (0..c.groups).map(group_name).collect();
    let mut slope_effects = Vec::with_capacity(c.groups);
    let mut intercept_effects = Vec::with_capacity(c.groups);
    for _ in 0..c.groups {
        slope_effects.push(slope_dists.iter().map(|dist| dist.sample(&mut rng)).collect::<Vec<f64>>());
        intercept_effects.push(intercept_dist.sample(&mut rng));
    }
    let sizes: Vec<usize> = (0..c.groups).map(|i| c.observations.draw(i, &mut rng)).collect();

    let mut obs = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        for t in 0..sizes[i] {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let y = x
                .iter()
                .zip(spec.slopes.iter().zip(&slope_effects[i]))
                .map(|(xv, (b, bi))| xv * (b + bi))
                .sum::<f64>()
                + spec.intercept
                + intercept_effects[i]
                + noise.sample(&mut rng);
            obs.push(Observation {
                group: g.clone(),
                t: t as i64,
                features: x,
                label: Target::Real(y),
            });
        }
    }
    let ds = Dataset::from_observations(TaskKind::Regression, d, obs)?;
    Ok((
        ds,
        LinearTruth {
            groups,
            slope_effects,
            intercept_effects,
        },
    ))
}

/// `y = v·tanh((W + W_i) x) + noise`. The per-group `W_i` sits inside the
/// nonlinearity so a model with only last-layer group parameters cannot
/// represent it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSynthSpec {
    pub common: SynthCommon,
    pub hidden: usize,
    /// Row-major `hidden x feature_dim`; drawn from N(0, 1) when absent.
    pub weights: Option<Vec<f64>>,
    /// Length `hidden`; drawn from N(0, 1) when absent.
    pub output: Option<Vec<f64>>,
    /// Standard deviation of each entry of `W_i`.
    pub weight_delta_std: f64,
    /// Explicit `W_i` per group (row-major), overriding the random draw.
    #[serde(default)]
    pub weight_deltas: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearTruth {
    pub groups: Vec<GroupId>,
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
    pub weight_deltas: Vec<Vec<f64>>,
}

pub fn synth_nonlinear_mixed(spec: &NonlinearSynthSpec) -> Result<(Dataset, NonlinearTruth)> {
    let c = &spec.common;
    c.validate()?;
    let (d, h) = (c.feature_dim, spec.hidden);
    if h == 0 {
        return Err(NmeError::invalid("hidden must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let std_normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let weights = match &spec.weights {
        Some(w) if w.len() == h * d => w.clone(),
        Some(w) => return Err(NmeError::DimensionMismatch { expected: h * d, got: w.len() }),
        None => std_normal(&mut rng, h * d),
    };
    let output = match &spec.output {
        Some(v) if v.len() == h => v.clone(),
        Some(v) => return Err(NmeError::DimensionMismatch { expected: h, got: v.len() }),
        None => std_normal(&mut rng, h),
    };
    let delta_dist = normal(spec.weight_delta_std)?;
    let weight_deltas: Vec<Vec<f64>> = match &spec.weight_deltas {
        Some(explicit) => {
            if explicit.len() != c.groups || explicit.iter().any(|w| w.len() != h * d) {
                return Err(NmeError::invalid("weight_deltas must hold one hidden x feature_dim matrix per group"));
            }
            explicit.clone()
        }
        None => (0..c.groups)
            .map(|_| (0..h * d).map(|_| delta_dist.sample(&mut rng)).collect())
            .collect(),
    };
    let sizes: Vec<usize> = (0..c.groups).map(|i| c.observations.draw(i, &mut rng)).collect();
    let noise = normal(c.noise_std)?;
    let groups: Vec<GroupId> = (0..c.groups).map(group_name).collect();

    let mut obs = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        for t in 0..sizes[i] {
            let x = std_normal(&mut rng, d);
            let y = (0..h)
                .map(|r| {
                    let pre: f64 = (0..d)
                        .map(|j| (weights[r * d + j] + weight_deltas[i][r * d + j]) * x[j])
                        .sum();
                    output[r] * pre.tanh()
                })
                .sum::<f64>()
                + noise.sample(&mut rng);
            obs.push(Observation {
                group: g.clone(),
                t: t as i64,
                features: x,
                label: Target::Real(y),
            });
        }
    }
    let ds = Dataset::from_observations(TaskKind::Regression, d, obs)?;
    Ok((
        ds,
        NonlinearTruth {
            groups,
            weights,
            output,
            weight_deltas,
        },
    ))
}

/// Additive shift of one transition logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionShift {
    pub from: usize,
    pub to: usize,
    pub shift: f64,
}

/// Markov-chain state sequences with one-hot-plus-noise emissions. Group
/// `i` uses logits `shared + cluster_shifts[i % clusters] + N(0, delta_std²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfSynthSpec {
    pub groups: usize,
    pub states: usize,
    pub sequences_per_group: CountSpec,
    pub sequence_length: CountSpec,
    /// Row-major `states x states`; zeros when absent.
    pub shared_logits: Option<Vec<f64>>,
    pub delta_std: f64,
    #[serde(default)]
    pub cluster_shifts: Vec<Vec<TransitionShift>>,
    pub emission_noise_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfTruth {
    pub groups: Vec<GroupId>,
    /// Row-major transition logits per group.
    pub logits: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
}

impl CrfTruth {
    /// Row-softmax of a group's logits.
    pub fn probabilities(&self, group: usize) -> Vec<f64> {
        let k = (self.logits[group].len() as f64).sqrt() as usize;
        let mut p = self.logits[group].clone();
        for row in p.chunks_mut(k) {
            crate::math::softmax_in_place(row);
        }
        p
    }
}

pub fn synth_crf(spec: &CrfSynthSpec) -> Result<(Dataset, CrfTruth)> {
    let k = spec.states;
    if k < 2 {
        return Err(NmeError::invalid("synth_crf needs at least 2 states"));
    }
    if spec.groups == 0 {
        return Err(NmeError::invalid("groups must be positive"));
    }
    spec.sequences_per_group.validate("sequences_per_group")?;
    spec.sequence_length.validate("sequence_length")?;
    let shared = match &spec.shared_logits {
        Some(s) if s.len() == k * k => s.clone(),
        Some(s) => return Err(NmeError::DimensionMismatch { expected: k * k, got: s.len() }),
        None => vec![0.0; k * k],
    };
    for shift in spec.cluster_shifts.iter().flatten() {
        if shift.from >= k || shift.to >= k {
            return Err(NmeError::invalid("transition shift outside the state range"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let delta = normal(spec.delta_std)?;
    let noise = normal(spec.emission_noise_std)?;
    let n_clusters = spec.cluster_shifts.len().max(1);

    let groups: Vec<GroupId> = (0..spec.groups).map(group_name).collect();
    let clusters: Vec<usize> = (0..spec.groups).map(|i| i % n_clusters).collect();
    let logits: Vec<Vec<f64>> = clusters
        .iter()
        .map(|&c| {
            let mut m: Vec<f64> = shared.iter().map(|s| s + delta.sample(&mut rng)).collect();
            if let Some(shifts) = spec.cluster_shifts.get(c) {
                for s in shifts {
                    m[s.from * k + s.to] += s.shift;
                }
            }
            m
        })
        .collect();
    let truth = CrfTruth { groups, logits, clusters };

    let mut seqs = Vec::new();
    for (gi, g) in truth.groups.iter().enumerate() {
        let probs = truth.probabilities(gi);
        let n_seq = spec.sequences_per_group.draw(gi, &mut rng);
        for s in 0..n_seq {
            let len = spec.sequence_length.draw(s, &mut rng);
            if len == 0 {
                return Err(NmeError::invalid("sequence_length must be >= 1"));
            }
            let mut steps = Vec::with_capacity(len);
            let mut state = rng.random_range(0..k);
            for step in 0..len {
                if step > 0 {
                    state = sample_categorical(&probs[state * k..(state + 1) * k], &mut rng);
                }
                let features = (0..k)
                    .map(|j| if j == state { 1.0 } else { 0.0 } + noise.sample(&mut rng))
                    .collect();
                steps.push(Step { features, state });
            }
            seqs.push(SequenceObservation {
                group: g.clone(),
                sequence_id: format!("s{s:04}"),
                t: s as i64,
                steps,
            });
        }
    }
    let ds = Dataset::from_sequences(k, k, seqs)?;
    Ok((ds, truth))
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
