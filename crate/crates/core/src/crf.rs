//! Linear-chain CRF with MLP emissions and a transition matrix that may
//! carry per-group deltas. Start and end potentials are uniform (zero), so
//! they cancel in the normalization.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupId, SequenceObservation};
use crate::error::{NmeError, Result};
use crate::math::{log_sum_exp, softmax_in_place};
use crate::mlp::{Mlp, MlpConfig, OutputKind};
use crate::objective::MixedModel;
use crate::params::{MixedParameterBank, ParamValues, TensorHandle};

/// Upper bound on `K^L` for exhaustive enumeration.
pub const BRUTE_FORCE_LIMIT: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    /// Emission network; its output must be `Classes { k }`.
    pub emission: MlpConfig,
    pub mix_transitions: bool,
    /// Forbid `y_t == y_{t+1}` by fixing diagonal transition logits at -inf.
    #[serde(default)]
    pub mask_self_transitions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    pub emission: Mlp,
    pub transitions: TensorHandle,
    pub states: usize,
    pub mask_self_transitions: bool,
}

impl CrfModel {
    /// Registers the emission network and a zero-initialized `K x K`
    /// transition tensor.
    pub fn register<R: Rng>(config: CrfConfig, bank: &mut MixedParameterBank, rng: &mut R) -> Result<Self> {
        let states = match config.emission.output {
            OutputKind::Classes { k } if k >= 2 => k,
            _ => return Err(NmeError::invalid("CRF emissions must produce K >= 2 logits")),
        };
        let emission = Mlp::register(config.emission, bank, "emission.", rng)?;
        let transitions = bank.register("transitions", &[states, states], config.mix_transitions, vec![0.0; states * states])?;
        Ok(CrfModel {
            emission,
            transitions,
            states,
            mask_self_transitions: config.mask_self_transitions,
        })
    }

    fn masked(&self, from: usize, to: usize) -> bool {
        self.mask_self_transitions && from == to
    }

    /// Transition logits with masking applied.
    pub fn transition_logits(&self, params: &ParamValues) -> Vec<f64> {
        let k = self.states;
        let mut t = params[self.transitions].clone();
        for i in 0..k {
            if self.masked(i, i) {
                t[i * k + i] = f64::NEG_INFINITY;
            }
        }
        t
    }

    pub fn emissions(&self, params: &ParamValues, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|x| self.emission.forward(params, x)).collect()
    }

    fn check_states(&self, states: &[usize]) -> Result<()> {
        if let Some(&s) = states.iter().find(|&&s| s >= self.states) {
            return Err(NmeError::invalid(format!("state {s} out of range for K = {}", self.states)));
        }
        Ok(())
    }

    /// Unnormalized log score of a state path.
    pub fn path_score(&self, emissions: &[Vec<f64>], trans: &[f64], states: &[usize]) -> f64 {
        let k = self.states;
        let mut s: f64 = states.iter().zip(emissions).map(|(&y, e)| e[y]).sum();
        for w in states.windows(2) {
            s += trans[w[0] * k + w[1]];
        }
        s
    }

    /// Forward log-messages `alpha[t][k]`.
    fn forward_messages(&self, emissions: &[Vec<f64>], trans: &[f64]) -> Vec<Vec<f64>> {
        let k = self.states;
        let mut alpha = Vec::with_capacity(emissions.len());
        alpha.push(emissions[0].clone());
        let mut buf = vec![0.0; k];
        for e in &emissions[1..] {
            let prev = alpha.last().expect("non-empty");
            let next: Vec<f64> = (0..k)
                .map(|to| {
                    for from in 0..k {
                        buf[from] = prev[from] + trans[from * k + to];
                    }
                    e[to] + log_sum_exp(&buf)
                })
                .collect();
            alpha.push(next);
        }
        alpha
    }

    /// Backward log-messages `beta[t][k]`.
    fn backward_messages(&self, emissions: &[Vec<f64>], trans: &[f64]) -> Vec<Vec<f64>> {
        let k = self.states;
        let len = emissions.len();
        let mut beta = vec![vec![0.0; k]; len];
        let mut buf = vec![0.0; k];
        for t in (0..len - 1).rev() {
            for from in 0..k {
                for to in 0..k {
                    buf[to] = trans[from * k + to] + emissions[t + 1][to] + beta[t + 1][to];
                }
                beta[t][from] = log_sum_exp(&buf);
            }
        }
        beta
    }

    /// Log partition function by the forward recursion.
    pub fn log_partition(&self, emissions: &[Vec<f64>], trans: &[f64]) -> f64 {
        log_sum_exp(self.forward_messages(emissions, trans).last().expect("L >= 1"))
    }

    /// Negative log-likelihood of the labelled sequence.
    pub fn sequence_nll(&self, params: &ParamValues, seq: &SequenceObservation) -> Result<f64> {
        if seq.steps.is_empty() {
            return Err(NmeError::invalid("sequence of length 0"));
        }
        let states = seq.states();
        self.check_states(&states)?;
        let features: Vec<Vec<f64>> = seq.steps.iter().map(|s| s.features.clone()).collect();
        let e = self.emissions(params, &features)?;
        let trans = self.transition_logits(params);
        Ok(self.log_partition(&e, &trans) - self.path_score(&e, &trans, &states))
    }

    /// The same quantity by enumerating all `K^L` paths.
    pub fn brute_force_nll(&self, params: &ParamValues, seq: &SequenceObservation) -> Result<f64> {
        let len = seq.steps.len();
        if len == 0 {
            return Err(NmeError::invalid("sequence of length 0"));
        }
        let states = seq.states();
        self.check_states(&states)?;
        let features: Vec<Vec<f64>> = seq.steps.iter().map(|s| s.features.clone()).collect();
        let e = self.emissions(params, &features)?;
        let trans = self.transition_logits(params);
        let scores: Vec<f64> = all_paths(self.states, len)?
            .map(|p| self.path_score(&e, &trans, &p))
            .collect();
        Ok(log_sum_exp(&scores) - self.path_score(&e, &trans, &states))
    }

    /// Most likely state path. Ties go to the lowest state index.
    pub fn viterbi(&self, params: &ParamValues, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.states;
        let e = self.emissions(params, features)?;
        let trans = self.transition_logits(params);
        let mut score = e[0].clone();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(features.len());
        for et in &e[1..] {
            let mut next = vec![f64::NEG_INFINITY; k];
            let mut ptr = vec![0; k];
            for to in 0..k {
                for from in 0..k {
                    let s = score[from] + trans[from * k + to];
                    if s > next[to] {
                        next[to] = s;
                        ptr[to] = from;
                    }
                }
                next[to] += et[to];
            }
            back.push(ptr);
            score = next;
        }
        let mut best = 0;
        for s in 1..k {
            if score[s] > score[best] {
                best = s;
            }
        }
        let mut path = vec![best; features.len()];
        for t in (1..features.len()).rev() {
            path[t - 1] = back[t - 1][path[t]];
        }
        Ok(path)
    }

    /// Best path by exhaustive enumeration (lexicographically first among ties).
    pub fn brute_force_argmax(&self, params: &ParamValues, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let e = self.emissions(params, features)?;
        let trans = self.transition_logits(params);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in all_paths(self.states, features.len())? {
            let s = self.path_score(&e, &trans, &p);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
        Ok(best.map(|(_, p)| p).unwrap_or_default())
    }

    /// Transition logits and row-softmax probabilities of a group.
    pub fn transition_matrix(&self, bank: &MixedParameterBank, group: &GroupId) -> TransitionMatrix {
        let params = bank.effective_params(group);
        let logits = self.transition_logits(&params);
        let mut probabilities = logits.clone();
        for row in probabilities.chunks_mut(self.states) {
            softmax_in_place(row);
        }
        TransitionMatrix {
            states: self.states,
            logits,
            probabilities,
        }
    }
}

fn all_paths(k: usize, len: usize) -> Result<impl Iterator<Item = Vec<usize>>> {
    let total = (k as f64).powi(len as i32);
    if total > BRUTE_FORCE_LIMIT as f64 {
        return Err(NmeError::invalid(format!("K^L = {total} exceeds the enumeration limit {BRUTE_FORCE_LIMIT}")));
    }
    let total = total as usize;
    Ok((0..total).map(move |mut code| {
        let mut p = vec![0; len];
        for slot in p.iter_mut().rev() {
            *slot = code % k;
            code /= k;
        }
        p
    }))
}

/// Row-major `K x K` transition logits and probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub states: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl TransitionMatrix {
    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.probabilities[from * self.states + to]
    }
}

/// Writes `group,from_state,to_state,logit,probability` rows.
pub fn write_transition_csv<'a, W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (&'a GroupId, &'a TransitionMatrix)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "from_state", "to_state", "logit", "probability"])?;
    for (g, m) in rows {
        for from in 0..m.states {
            for to in 0..m.states {
                let i = from * m.states + to;
                w.write_record([
                    g.as_str().to_string(),
                    from.to_string(),
                    to.to_string(),
                    m.logits[i].to_string(),
                    m.probabilities[i].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

impl MixedModel for CrfModel {
    type Example = SequenceObservation;

    fn group_of<'a>(&self, example: &'a SequenceObservation) -> &'a GroupId {
        &example.group
    }

    fn loss(&self, params: &ParamValues, example: &SequenceObservation) -> Result<f64> {
        self.sequence_nll(params, example)
    }

    fn loss_grad(&self, params: &ParamValues, seq: &SequenceObservation, grad: &mut ParamValues) -> Result<f64> {
        let len = seq.steps.len();
        if len == 0 {
            return Err(NmeError::invalid("sequence of length 0"));
        }
        let k = self.states;
        let states = seq.states();
        self.check_states(&states)?;
        let caches = seq
            .steps
            .iter()
            .map(|s| self.emission.forward_cached(params, &s.features))
            .collect::<Result<Vec<_>>>()?;
        let e: Vec<Vec<f64>> = caches.iter().map(|c| c.output().to_vec()).collect();
        let trans = self.transition_logits(params);
        let alpha = self.forward_messages(&e, &trans);
        let beta = self.backward_messages(&e, &trans);
        let log_z = log_sum_exp(&alpha[len - 1]);
        let nll = log_z - self.path_score(&e, &trans, &states);
        if !nll.is_finite() {
            return Err(NmeError::non_finite(format!(
                "sequence {} of group {} has NLL {nll}",
                seq.sequence_id, seq.group
            )));
        }

        // d NLL / d emissions = posterior marginals - indicators
        for t in 0..len {
            let mut d: Vec<f64> = (0..k).map(|s| (alpha[t][s] + beta[t][s] - log_z).exp()).collect();
            d[states[t]] -= 1.0;
            self.emission.backward(params, &caches[t], &d, grad);
        }
        // d NLL / d T = expected pair counts - observed pair counts
        let gt = &mut grad[self.transitions];
        for t in 1..len {
            for from in 0..k {
                for to in 0..k {
                    if self.masked(from, to) {
                        continue;
                    }
                    let lp = alpha[t - 1][from] + trans[from * k + to] + e[t][to] + beta[t][to] - log_z;
                    gt[from * k + to] += lp.exp();
                }
            }
            gt[states[t - 1] * k + states[t]] -= 1.0;
        }
        Ok(nll)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Step;
    use crate::mlp::{Activation, LayerMixing, Placement};
    use crate::objective::{finite_diff_check, group_sizes, ObjectiveOptions};
    use crate::params::NmeState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A CRF whose emissions equal the input features (identity layer).
    fn identity_crf(k: usize, mask: bool) -> (CrfModel, MixedParameterBank) {
        let mut bank = MixedParameterBank::new(["a".into()]);
        let cfg = CrfConfig {
            emission: MlpConfig {
                widths: vec![k, k],
                activation: Activation::Tanh,
                mixing: vec![LayerMixing::NONE],
                output: OutputKind::Classes { k },
            },
            mix_transitions: true,
            mask_self_transitions: mask,
        };
        let crf = CrfModel::register(cfg, &mut bank, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = bank.generic_mut(crf.emission.weights[0]);
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..k {
            w[i * k + i] = 1.0;
        }
        (crf, bank)
    }

    fn seq(emissions: &[Vec<f64>], states: &[usize]) -> SequenceObservation {
        SequenceObservation {
            group: "a".into(),
            sequence_id: "s".into(),
            t: 0,
            steps: emissions
                .iter()
                .zip(states)
                .map(|(e, &s)| Step {
                    features: e.clone(),
                    state: s,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_scores_give_log_four() {
        let (crf, bank) = identity_crf(2, false);
        let p = bank.effective_params_at(None);
        let nll = crf.sequence_nll(&p, &seq(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1])).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
        assert!((nll - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn single_step_reduces_to_softmax() {
        let (crf, bank) = identity_crf(2, false);
        let p = bank.effective_params_at(None);
        let (a, b) = (0.7, -1.3);
        let nll = crf.sequence_nll(&p, &seq(&[vec![a, b]], &[0])).unwrap();
        assert!((nll - (-a + (a.exp() + b.exp()).ln())).abs() < 1e-12);
        let bf = crf.brute_force_nll(&p, &seq(&[vec![a, b]], &[0])).unwrap();
        assert!((nll - bf).abs() < 1e-12);
    }

    #[test]
    fn constant_emission_shift_cancels() {
        let (crf, mut bank) = identity_crf(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        bank.generic_mut(crf.transitions).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let p = bank.effective_params_at(None);
        let e: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut shifted = e.clone();
        shifted[2].iter_mut().for_each(|v| *v += 5.5);
        let a = crf.brute_force_nll(&p, &seq(&e, &[0, 2, 1, 1])).unwrap();
        let b = crf.brute_force_nll(&p, &seq(&shifted, &[0, 2, 1, 1])).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn empty_sequence_rejected() {
        let (crf, bank) = identity_crf(2, false);
        let p = bank.effective_params_at(None);
        assert!(crf.sequence_nll(&p, &seq(&[], &[])).is_err());
    }

    #[test]
    fn enumeration_limit() {
        let (crf, bank) = identity_crf(4, false);
        let p = bank.effective_params_at(None);
        let e = vec![vec![0.0; 4]; 9];
        assert!(crf.brute_force_nll(&p, &seq(&e, &[0; 9])).is_err());
    }

    #[test]
    fn viterbi_decoupled_and_ties() {
        let (crf, bank) = identity_crf(3, false);
        let p = bank.effective_params_at(None);
        let e = vec![vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 5.0], vec![0.0, 5.0, 0.0]];
        assert_eq!(crf.viterbi(&p, &e).unwrap(), vec![0, 2, 1]);
        assert_eq!(crf.viterbi(&p, &vec![vec![0.0; 3]; 4]).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn masked_self_transitions_never_decoded() {
        let (crf, bank) = identity_crf(3, true);
        let p = bank.effective_params_at(None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let e: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let path = crf.viterbi(&p, &e).unwrap();
            assert!(path.windows(2).all(|w| w[0] != w[1]));
            assert_eq!(path, crf.brute_force_argmax(&p, &e).unwrap());
        }
        let tm = crf.transition_matrix(&bank, &"a".into());
        assert_eq!(tm.probability(1, 1), 0.0);
        assert!((tm.probabilities[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transition_matrix_views() {
        let (crf, mut bank) = identity_crf(3, false);
        let tbar: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        bank.generic_mut(crf.transitions).copy_from_slice(&tbar);
        let m = crf.transition_matrix(&bank, &"a".into());
        assert_eq!(m.logits, tbar);
        for row in m.probabilities.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut shifted = tbar.clone();
        shifted[3..6].iter_mut().for_each(|v| *v += 2.0);
        bank.generic_mut(crf.transitions).copy_from_slice(&shifted);
        let m2 = crf.transition_matrix(&bank, &"a".into());
        for i in 3..6 {
            assert!((m.probabilities[i] - m2.probabilities[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_csv_has_k_squared_rows_per_group() {
        let (crf, bank) = identity_crf(4, false);
        let m = crf.transition_matrix(&bank, &"a".into());
        let g: GroupId = "a".into();
        let mut buf = Vec::new();
        write_transition_csv(&mut buf, [(&g, &m)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "group,from_state,to_state,logit,probability");
        assert_eq!(lines.len(), 1 + 16);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut bank = MixedParameterBank::new(["a".into(), "b".into()]);
        let cfg = CrfConfig {
            emission: MlpConfig::new(2, &[3], OutputKind::Classes { k: 3 }, Activation::Tanh, Placement::All),
            mix_transitions: true,
            mask_self_transitions: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let crf = CrfModel::register(cfg, &mut bank, &mut rng).unwrap();
        bank.generic_mut(crf.transitions).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        for g in 0..2 {
            bank.delta_mut(g).iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let data: Vec<SequenceObservation> = (0..3)
            .map(|i| {
                let e: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let mut s = seq(&e, &[0, 2, 1, 1]);
                s.group = if i == 0 { "b".into() } else { "a".into() };
                s
            })
            .collect();
        let refs: Vec<&SequenceObservation> = data.iter().collect();
        let sizes = group_sizes(&crf, &bank, &data);
        let mut state = NmeState::new(bank.mixed_dim());
        state.sigma2 = 1.3;
        let err = finite_diff_check(&crf, &bank, &state, &refs, &sizes, ObjectiveOptions::default(), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
