//! Mixed parameters: generic tensors shared by every group plus per-group
//! deltas, the Gaussian penalty on the deltas and the epoch-boundary updates
//! of the loss scale and the diagonal delta covariance.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Index, IndexMut};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::GroupId;
use crate::error::{NmeError, Result};

/// Lower bound for the loss scale and every covariance entry.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorHandle(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub mixed: bool,
    /// Start of this tensor's block in the flat delta vector.
    offset: Option<usize>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn offset(&self) -> Option<usize> {
        self.offset
    }
}

/// One value array per registered tensor, indexed by handle. Used for
/// effective parameters and for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamValues(pub Vec<Vec<f64>>);

impl ParamValues {
    pub fn zeros_like(bank: &MixedParameterBank) -> Self {
        ParamValues(bank.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn fill_zero(&mut self) {
        for v in &mut self.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add_scaled(&mut self, other: &ParamValues, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

impl Index<TensorHandle> for ParamValues {
    type Output = Vec<f64>;

    fn index(&self, h: TensorHandle) -> &Vec<f64> {
        &self.0[h.0]
    }
}

impl IndexMut<TensorHandle> for ParamValues {
    fn index_mut(&mut self, h: TensorHandle) -> &mut Vec<f64> {
        &mut self.0[h.0]
    }
}

/// Generic tensors plus a dense flat delta vector per known group.
///
/// Mixed tensors occupy consecutive blocks of the flat delta vector in
/// registration order, so the flat index doubles as the position in the
/// diagonal covariance. Groups that are not known to the bank behave as if
/// their deltas were zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankDoc", into = "BankDoc")]
pub struct MixedParameterBank {
    tensors: Vec<ParamTensor>,
    groups: Vec<GroupId>,
    group_index: HashMap<GroupId, usize>,
    deltas: Vec<Vec<f64>>,
    mixed_dim: usize,
    training_started: bool,
}

impl MixedParameterBank {
    /// Creates an empty bank for the given groups (duplicates ignored).
    pub fn new(groups: impl IntoIterator<Item = GroupId>) -> Self {
        let mut bank = MixedParameterBank {
            tensors: Vec::new(),
            groups: Vec::new(),
            group_index: HashMap::new(),
            deltas: Vec::new(),
            mixed_dim: 0,
            training_started: false,
        };
        for g in groups {
            if !bank.group_index.contains_key(&g) {
                bank.group_index.insert(g.clone(), bank.groups.len());
                bank.groups.push(g);
                bank.deltas.push(Vec::new());
            }
        }
        bank
    }

    /// Adds a tensor with the given generic values. Deltas of mixed tensors
    /// start at zero for every group.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mixed: bool,
        init: Vec<f64>,
    ) -> Result<TensorHandle> {
        if self.training_started {
            return Err(NmeError::RegistrationClosed);
        }
        let len: usize = shape.iter().product();
        if init.len() != len {
            return Err(NmeError::DimensionMismatch {
                expected: len,
                got: init.len(),
            });
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(NmeError::non_finite("initial tensor values"));
        }
        let offset = if mixed {
            let off = self.mixed_dim;
            self.mixed_dim += len;
            for d in &mut self.deltas {
                d.resize(self.mixed_dim, 0.0);
            }
            Some(off)
        } else {
            None
        };
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            values: init,
            mixed,
            offset,
        });
        Ok(TensorHandle(self.tensors.len() - 1))
    }

    /// Closes registration.
    pub fn start_training(&mut self) {
        self.training_started = true;
    }

    pub fn training_started(&self) -> bool {
        self.training_started
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensor(&self, h: TensorHandle) -> &ParamTensor {
        &self.tensors[h.0]
    }

    pub fn generic(&self, h: TensorHandle) -> &[f64] {
        &self.tensors[h.0].values
    }

    pub fn generic_mut(&mut self, h: TensorHandle) -> &mut [f64] {
        &mut self.tensors[h.0].values
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    pub fn group_index(&self, group: &GroupId) -> Option<usize> {
        self.group_index.get(group).copied()
    }

    /// Total number of scalar delta parameters per group.
    pub fn mixed_dim(&self) -> usize {
        self.mixed_dim
    }

    /// Number of generic scalar parameters.
    pub fn generic_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Flat delta position of element `elem` of tensor `h`.
    pub fn flat_index(&self, h: TensorHandle, elem: usize) -> Option<usize> {
        let t = &self.tensors[h.0];
        match t.offset {
            Some(off) if elem < t.len() => Some(off + elem),
            _ => None,
        }
    }

    pub fn delta(&self, group: usize) -> &[f64] {
        &self.deltas[group]
    }

    pub fn delta_mut(&mut self, group: usize) -> &mut [f64] {
        &mut self.deltas[group]
    }

    pub fn all_deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    /// The block of a group's delta belonging to tensor `h`, if mixed.
    pub fn tensor_delta(&self, group: usize, h: TensorHandle) -> Option<&[f64]> {
        let t = &self.tensors[h.0];
        t.offset.map(|off| &self.deltas[group][off..off + t.len()])
    }

    pub fn tensor_delta_mut(&mut self, group: usize, h: TensorHandle) -> Option<&mut [f64]> {
        let t = &self.tensors[h.0];
        let len = t.len();
        t.offset.map(move |off| &mut self.deltas[group][off..off + len])
    }

    pub fn zero_deltas(&mut self) {
        for d in &mut self.deltas {
            d.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Generic plus delta values for a group index; `None` gives the generic model.
    pub fn effective_params_at(&self, group: Option<usize>) -> ParamValues {
        ParamValues(
            self.tensors
                .iter()
                .map(|t| match (group, t.offset) {
                    (Some(g), Some(off)) => t
                        .values
                        .iter()
                        .zip(&self.deltas[g][off..off + t.len()])
                        .map(|(a, b)| a + b)
                        .collect(),
                    _ => t.values.clone(),
                })
                .collect(),
        )
    }

    /// Effective parameters for a group; unknown groups fall back to the generic values.
    pub fn effective_params(&self, group: &GroupId) -> ParamValues {
        self.effective_params_at(self.group_index(group))
    }

    /// Gaussian penalty `delta^T Sigma^-1 delta` of one group.
    pub fn penalty(&self, state: &NmeState, group: &GroupId) -> f64 {
        match self.group_index(group) {
            Some(g) => penalty(&self.deltas[g], state),
            None => 0.0,
        }
    }

    /// Euclidean norm of every group's flat delta.
    pub fn delta_norms(&self) -> BTreeMap<GroupId, f64> {
        self.groups
            .iter()
            .zip(&self.deltas)
            .map(|(g, d)| (g.clone(), crate::math::l2_norm(d)))
            .collect()
    }
}

/// `sum_k delta_k^2 / sigma_diag_k`.
pub fn penalty(delta: &[f64], state: &NmeState) -> f64 {
    debug_assert_eq!(delta.len(), state.sigma_diag.len());
    delta
        .iter()
        .zip(&state.sigma_diag)
        .map(|(d, s)| d * d / s)
        .sum()
}

/// Adds `scale * d penalty / d delta` into `grad`.
pub fn accumulate_penalty_grad(delta: &[f64], state: &NmeState, scale: f64, grad: &mut [f64]) {
    for ((g, d), s) in grad.iter_mut().zip(delta).zip(&state.sigma_diag) {
        *g += scale * 2.0 * d / s;
    }
}

/// Fraction of a group's `n_i` training observations present in the batch.
pub fn batch_scale<'a>(group: &GroupId, batch: impl IntoIterator<Item = &'a GroupId>, n_i: usize) -> f64 {
    let count = batch.into_iter().filter(|g| *g == group).count();
    count_scale(count, n_i)
}

pub(crate) fn count_scale(in_batch: usize, n_i: usize) -> f64 {
    assert!(n_i >= 1, "group must have at least one training observation");
    in_batch as f64 / n_i as f64
}

/// Loss scale and diagonal delta covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateDoc", into = "StateDoc")]
pub struct NmeState {
    pub sigma2: f64,
    pub sigma_diag: Vec<f64>,
}

impl NmeState {
    /// Unit loss scale and unit prior covariance.
    pub fn new(mixed_dim: usize) -> Self {
        NmeState {
            sigma2: 1.0,
            sigma_diag: vec![1.0; mixed_dim],
        }
    }

    pub fn update_sigma2(&mut self, avg_train_loss: f64) -> Result<()> {
        if !avg_train_loss.is_finite() {
            return Err(NmeError::non_finite(format!("average training loss {avg_train_loss}")));
        }
        self.sigma2 = avg_train_loss.max(VARIANCE_FLOOR);
        Ok(())
    }

    /// Zero-mean, divide-by-n diagonal covariance of the per-group deltas.
    pub fn update_sigma_diag(&mut self, deltas: &[Vec<f64>]) -> Result<()> {
        if deltas.len() < 2 {
            return Err(NmeError::invalid(format!(
                "covariance update needs at least 2 groups, got {}",
                deltas.len()
            )));
        }
        let dim = self.sigma_diag.len();
        let n = deltas.len() as f64;
        let mut acc = vec![0.0; dim];
        for d in deltas {
            if d.len() != dim {
                return Err(NmeError::DimensionMismatch { expected: dim, got: d.len() });
            }
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v * v;
            }
        }
        for (s, a) in self.sigma_diag.iter_mut().zip(acc) {
            let v = a / n;
            if !v.is_finite() {
                return Err(NmeError::non_finite("delta covariance"));
            }
            *s = v.max(VARIANCE_FLOOR);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serialization. f64 arrays are stored as base64 of their little-endian bytes
// and scalars as hex bit patterns, so a round trip is bit-exact.

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| NmeError::Serialization(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(NmeError::Serialization("f64 payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn encode_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn decode_f64(text: &str) -> Result<f64> {
    u64::from_str_radix(text, 16)
        .map(f64::from_bits)
        .map_err(|e| NmeError::Serialization(format!("bad f64 bits '{text}': {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    mixed: bool,
    values: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BankDoc {
    tensors: Vec<TensorDoc>,
    groups: Vec<GroupId>,
    /// One encoded flat delta per group, same order as `groups`.
    deltas: Vec<String>,
    training_started: bool,
}

impl From<MixedParameterBank> for BankDoc {
    fn from(bank: MixedParameterBank) -> Self {
        BankDoc {
            tensors: bank
                .tensors
                .iter()
                .map(|t| TensorDoc {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    mixed: t.mixed,
                    values: encode_f64s(&t.values),
                })
                .collect(),
            deltas: bank.deltas.iter().map(|d| encode_f64s(d)).collect(),
            groups: bank.groups,
            training_started: bank.training_started,
        }
    }
}

impl TryFrom<BankDoc> for MixedParameterBank {
    type Error = NmeError;

    fn try_from(doc: BankDoc) -> Result<Self> {
        let mut bank = MixedParameterBank::new(doc.groups);
        if bank.groups.len() != doc.deltas.len() {
            return Err(NmeError::Serialization("one delta entry per group required".into()));
        }
        for t in doc.tensors {
            bank.register(t.name, &t.shape, t.mixed, decode_f64s(&t.values)?)?;
        }
        for (g, text) in doc.deltas.iter().enumerate() {
            let d = decode_f64s(text)?;
            if d.len() != bank.mixed_dim {
                return Err(NmeError::Serialization(format!(
                    "delta of group {} has length {}, expected {}",
                    bank.groups[g],
                    d.len(),
                    bank.mixed_dim
                )));
            }
            bank.deltas[g] = d;
        }
        bank.training_started = doc.training_started;
        Ok(bank)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateDoc {
    sigma2: String,
    sigma_diag: String,
}

impl From<NmeState> for StateDoc {
    fn from(s: NmeState) -> Self {
        StateDoc {
            sigma2: encode_f64(s.sigma2),
            sigma_diag: encode_f64s(&s.sigma_diag),
        }
    }
}

impl TryFrom<StateDoc> for NmeState {
    type Error = NmeError;

    fn try_from(doc: StateDoc) -> Result<Self> {
        Ok(NmeState {
            sigma2: decode_f64(&doc.sigma2)?,
            sigma_diag: decode_f64s(&doc.sigma_diag)?,
        })
    }
}

/// Bank and state together, the unit that gets saved and restored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub bank: MixedParameterBank,
    pub state: NmeState,
}

impl Snapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
