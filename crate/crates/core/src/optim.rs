//! Optimizers over a bank's generic tensors and per-group deltas.

use serde::{Deserialize, Serialize};

use crate::objective::BatchGradient;
use crate::params::{MixedParameterBank, TensorHandle};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam or plain SGD. Weight decay is an L2 term added to the generic
/// gradients only; deltas are regularized by the penalty alone.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
    step: i32,
    generic: Vec<Moments>,
    deltas: Vec<Moments>,
    /// Generic tensors that are never updated.
    frozen: Vec<bool>,
    deltas_frozen: bool,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, bank: &MixedParameterBank) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            hyper: AdamHyper::default(),
            step: 0,
            generic: bank.tensors().iter().map(|t| Moments::zeros(t.len())).collect(),
            deltas: bank.groups().iter().map(|_| Moments::zeros(bank.mixed_dim())).collect(),
            frozen: vec![false; bank.tensors().len()],
            deltas_frozen: false,
        }
    }

    pub fn freeze(&mut self, h: TensorHandle) {
        self.frozen[h.0] = true;
    }

    /// Leaves every group delta at its current value.
    pub fn freeze_deltas(&mut self) {
        self.deltas_frozen = true;
    }

    fn update(kind: OptimizerKind, hyper: &AdamHyper, lr: f64, step: i32, values: &mut [f64], grad: impl Iterator<Item = f64>, mom: &mut Moments) {
        match kind {
            OptimizerKind::Sgd => {
                for (v, g) in values.iter_mut().zip(grad) {
                    *v -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - hyper.beta1.powi(step);
                let c2 = 1.0 - hyper.beta2.powi(step);
                for (((v, g), m), s) in values.iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
                    *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                    *s = hyper.beta2 * *s + (1.0 - hyper.beta2) * g * g;
                    *v -= lr * (*m / c1) / ((*s / c2).sqrt() + hyper.eps);
                }
            }
        }
    }

    /// Applies one update. Groups without a gradient entry are updated with
    /// a zero gradient, which still moves them under Adam momentum.
    pub fn step(&mut self, bank: &mut MixedParameterBank, grad: &BatchGradient) {
        self.step += 1;
        let (kind, hyper, lr, wd, step) = (self.kind, self.hyper, self.lr, self.weight_decay, self.step);
        for t in 0..bank.tensors().len() {
            if self.frozen[t] {
                continue;
            }
            let h = TensorHandle(t);
            let g = &grad.generic[h];
            let values = bank.generic_mut(h);
            let decayed: Vec<f64> = g.iter().zip(values.iter()).map(|(g, v)| g + wd * v).collect();
            Self::update(kind, &hyper, lr, step, values, decayed.into_iter(), &mut self.generic[t]);
        }
        if bank.mixed_dim() == 0 || self.deltas_frozen {
            return;
        }
        for gi in 0..bank.groups().len() {
            let delta = bank.delta_mut(gi);
            match grad.deltas.get(&gi) {
                Some(g) => Self::update(kind, &hyper, lr, step, delta, g.iter().copied(), &mut self.deltas[gi]),
                None if kind == OptimizerKind::Adam => {
                    Self::update(kind, &hyper, lr, step, delta, std::iter::repeat(0.0), &mut self.deltas[gi])
                }
                None => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamValues;
    use std::collections::BTreeMap;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut bank = MixedParameterBank::new(["a".into()]);
        let h = bank.register("w", &[2], true, vec![1.0, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 0.0, &bank);
        let mut deltas = BTreeMap::new();
        deltas.insert(0, vec![-3.0, 0.0]);
        let grad = BatchGradient {
            generic: ParamValues(vec![vec![2.0, -0.5]]),
            deltas,
            data_loss: 0.0,
            objective: 0.0,
        };
        opt.step(&mut bank, &grad);
        let w = bank.generic(h);
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9);
        assert!((bank.delta(0)[0] - 0.01).abs() < 1e-9);
        assert_eq!(bank.delta(0)[1], 0.0);
    }

    #[test]
    fn frozen_tensor_untouched_and_weight_decay_generic_only() {
        let mut bank = MixedParameterBank::new(["a".into()]);
        let h0 = bank.register("w", &[1], true, vec![1.0]).unwrap();
        let h1 = bank.register("v", &[1], false, vec![2.0]).unwrap();
        bank.delta_mut(0)[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5, &bank);
        opt.freeze(h0);
        let grad = BatchGradient {
            generic: ParamValues(vec![vec![1.0], vec![0.0]]),
            deltas: [(0, vec![0.0])].into_iter().collect(),
            data_loss: 0.0,
            objective: 0.0,
        };
        opt.step(&mut bank, &grad);
        assert_eq!(bank.generic(h0), &[1.0]);
        assert!((bank.generic(h1)[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(bank.delta(0)[0], 1.0);
    }
}
