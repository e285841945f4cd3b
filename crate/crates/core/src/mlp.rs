//! Multi-layer perceptron whose weights and biases may carry per-group
//! deltas. Forward and backward passes are written out per layer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupId, Observation, Target};
use crate::error::{NmeError, Result};
use crate::math::log_sum_exp;
use crate::objective::MixedModel;
use crate::params::{MixedParameterBank, ParamValues, TensorHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputKind {
    Regression,
    Classes { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LayerMixing {
    pub weights: bool,
    pub bias: bool,
}

impl LayerMixing {
    pub const NONE: LayerMixing = LayerMixing {
        weights: false,
        bias: false,
    };
    pub const BOTH: LayerMixing = LayerMixing {
        weights: true,
        bias: true,
    };
}

/// Where group-specific parameters go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Last,
    /// Last layer plus the CRF transition matrix.
    #[serde(rename = "last+T")]
    LastAndTransitions,
    All,
}

impl Placement {
    /// Per-layer mixing flags for a network with `layers` linear layers.
    pub fn layer_mixing(self, layers: usize) -> Vec<LayerMixing> {
        (0..layers)
            .map(|l| match self {
                Placement::None => LayerMixing::NONE,
                Placement::Last | Placement::LastAndTransitions => {
                    if l + 1 == layers {
                        LayerMixing::BOTH
                    } else {
                        LayerMixing::NONE
                    }
                }
                Placement::All => LayerMixing::BOTH,
            })
            .collect()
    }

    pub fn mixes_transitions(self) -> bool {
        matches!(self, Placement::LastAndTransitions | Placement::All)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[input, hidden..., output]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// One entry per linear layer (`widths.len() - 1`).
    pub mixing: Vec<LayerMixing>,
    pub output: OutputKind,
}

impl MlpConfig {
    pub fn new(input: usize, hidden: &[usize], output: OutputKind, activation: Activation, placement: Placement) -> Self {
        let out = match output {
            OutputKind::Regression => 1,
            OutputKind::Classes { k } => k,
        };
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(out);
        let layers = widths.len() - 1;
        MlpConfig {
            widths,
            activation,
            mixing: placement.layer_mixing(layers),
            output,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.output {
            OutputKind::Regression => LossKind::Mse,
            OutputKind::Classes { .. } => LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(NmeError::invalid("MLP widths need an input and output layer, all >= 1"));
        }
        if self.mixing.len() != self.layers() {
            return Err(NmeError::invalid(format!(
                "expected {} mixing flags, got {}",
                self.layers(),
                self.mixing.len()
            )));
        }
        let out = *self.widths.last().expect("non-empty");
        match self.output {
            OutputKind::Regression if out != 1 => Err(NmeError::invalid("regression output width must be 1")),
            OutputKind::Classes { k } if k != out || k < 2 => {
                Err(NmeError::invalid("class output width must equal k >= 2"))
            }
            _ => Ok(()),
        }
    }
}

/// Handles of an MLP's tensors inside a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub weights: Vec<TensorHandle>,
    pub biases: Vec<TensorHandle>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("at least the input")
    }

    /// Pre-activations of the hidden layers.
    pub fn hidden_preactivations(&self) -> impl Iterator<Item = f64> + '_ {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flatten().copied()
    }
}

impl Mlp {
    /// Registers weights (uniform Glorot) and zero biases in the bank.
    pub fn register<R: Rng>(config: MlpConfig, bank: &mut MixedParameterBank, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..config.layers() {
            let (fan_in, fan_out) = (config.widths[l], config.widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let init: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            weights.push(bank.register(format!("{prefix}layer{l}.weight"), &[fan_out, fan_in], config.mixing[l].weights, init)?);
            biases.push(bank.register(format!("{prefix}layer{l}.bias"), &[fan_out], config.mixing[l].bias, vec![0.0; fan_out])?);
        }
        Ok(Mlp { config, weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.config.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.config.widths.last().expect("validated")
    }

    pub fn forward_cached(&self, params: &ParamValues, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(NmeError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let layers = self.config.layers();
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        inputs.push(x.to_vec());
        for l in 0..layers {
            let w = &params[self.weights[l]];
            let b = &params[self.biases[l]];
            let a = &inputs[l];
            let n_in = a.len();
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(r, bias)| bias + w[r * n_in..(r + 1) * n_in].iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(NmeError::non_finite(format!("layer {l} pre-activation")));
            }
            let out = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.config.activation.apply(v)).collect()
            };
            pre.push(z);
            inputs.push(out);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Prediction for one input: a single value (regression) or K logits.
    pub fn forward(&self, params: &ParamValues, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(params, x)?.inputs.pop().expect("output"))
    }

    /// Convenience wrapper resolving a group's effective parameters.
    pub fn forward_group(&self, bank: &MixedParameterBank, group: &GroupId, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(&bank.effective_params(group), x)
    }

    /// Input of the final linear layer (the learned representation).
    pub fn representation(&self, params: &ParamValues, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = self.forward_cached(params, x)?;
        let last = cache.inputs.len() - 2;
        Ok(cache.inputs.swap_remove(last))
    }

    /// First component of each group's output-bias delta.
    pub fn last_bias_deltas(&self, bank: &MixedParameterBank) -> Result<BTreeMap<GroupId, f64>> {
        let h = *self.biases.last().expect("validated");
        if !bank.tensor(h).mixed {
            return Err(NmeError::invalid("output bias carries no per-group delta"));
        }
        Ok(bank
            .groups()
            .iter()
            .enumerate()
            .map(|(g, id)| (id.clone(), bank.tensor_delta(g, h).expect("mixed")[0]))
            .collect())
    }

    /// Adds the gradient of a scalar whose derivative with respect to the
    /// network output is `d_out` into `grad`.
    pub fn backward(&self, params: &ParamValues, cache: &ForwardCache, d_out: &[f64], grad: &mut ParamValues) {
        let layers = self.config.layers();
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let a = &cache.inputs[l];
            let n_in = a.len();
            {
                let gw = &mut grad[self.weights[l]];
                for (r, d) in delta.iter().enumerate() {
                    if *d != 0.0 {
                        for (g, ai) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(a) {
                            *g += d * ai;
                        }
                    }
                }
            }
            for (g, d) in grad[self.biases[l]].iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &params[self.weights[l]];
            let z_prev = &cache.pre[l - 1];
            delta = (0..n_in)
                .map(|c| {
                    let back: f64 = delta.iter().enumerate().map(|(r, d)| d * w[r * n_in + c]).sum();
                    back * self.config.activation.derivative(z_prev[c], a[c])
                })
                .collect();
        }
    }
}

/// Downstream loss and its derivative with respect to the network output.
pub fn loss_and_output_grad(kind: LossKind, pred: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
    match (kind, target) {
        (LossKind::Mse, Target::Real(y)) => {
            if pred.len() != 1 {
                return Err(NmeError::DimensionMismatch { expected: 1, got: pred.len() });
            }
            let r = pred[0] - y;
            Ok((r * r, vec![2.0 * r]))
        }
        (LossKind::CrossEntropy, Target::Class(k)) => {
            if *k >= pred.len() {
                return Err(NmeError::invalid(format!("class {k} out of range for {} logits", pred.len())));
            }
            let lse = log_sum_exp(pred);
            let mut g: Vec<f64> = pred.iter().map(|v| (v - lse).exp()).collect();
            g[*k] -= 1.0;
            Ok((lse - pred[*k], g))
        }
        _ => Err(NmeError::invalid("loss kind does not match target kind")),
    }
}

/// Downstream loss only.
pub fn loss(kind: LossKind, pred: &[f64], target: &Target) -> Result<f64> {
    loss_and_output_grad(kind, pred, target).map(|(l, _)| l)
}

impl MixedModel for Mlp {
    type Example = Observation;

    fn group_of<'a>(&self, example: &'a Observation) -> &'a GroupId {
        &example.group
    }

    fn loss(&self, params: &ParamValues, example: &Observation) -> Result<f64> {
        let pred = self.forward(params, &example.features)?;
        loss(self.config.loss_kind(), &pred, &example.label)
    }

    fn loss_grad(&self, params: &ParamValues, example: &Observation, grad: &mut ParamValues) -> Result<f64> {
        let cache = self.forward_cached(params, &example.features)?;
        let (l, d_out) = loss_and_output_grad(self.config.loss_kind(), cache.output(), &example.label)?;
        self.backward(params, &cache, &d_out, grad);
        Ok(l)
    }
}
