//! Policy over operator sequences and its policy-gradient update.
//!
//! The network sees the constant input 1. Its output is one logit slice per
//! template node (pre-order), sized by the node's operator alphabet.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::expr::{Arity, OperatorSequence, OperatorSet, TreeTemplate};
use crate::optim::AdamState;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Width of the optional tanh hidden layer; `None` maps the input straight to logits.
    pub hidden_width: Option<usize>,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub nu: f64,
    pub risk_seeking: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { hidden_width: None, learning_rate: 0.002, epsilon: 0.1, nu: 0.5, risk_seeking: true }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(FexError::Config(format!("ε must satisfy 0 ≤ ε < 1, got {}", self.epsilon)));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(FexError::Config(format!("ν must satisfy 0 < ν ≤ 1, got {}", self.nu)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FexError::Config(format!("controller learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.hidden_width == Some(0) {
            return Err(FexError::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters Φ, flattened.
///
/// Without a hidden layer: `[w (out), b (out)]`.
/// With hidden width `h`: `[w1 (h), b1 (h), w2 (out x h, row-major), b2 (out)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub phi: Vec<f64>,
    pub hidden_width: Option<usize>,
    pub output_width: usize,
}

impl ControllerParams {
    pub fn zeros(output_width: usize, hidden_width: Option<usize>) -> Self {
        let n = match hidden_width {
            None => 2 * output_width,
            Some(h) => 2 * h + output_width * h + output_width,
        };
        Self { phi: vec![0.0; n], hidden_width, output_width }
    }

    /// Uniform `±1/sqrt(fan_in)` weights for the hidden option, zeros otherwise.
    pub fn init(output_width: usize, hidden_width: Option<usize>, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(output_width, hidden_width);
        if let Some(h) = hidden_width {
            let k2 = 1.0 / (h as f64).sqrt();
            for (i, v) in p.phi.iter_mut().enumerate() {
                let bound = if i < 2 * h { 1.0 } else { k2 };
                *v = rng.gen_range(-bound..=bound);
            }
        }
        p
    }

    fn hidden(&self) -> Option<Vec<f64>> {
        self.hidden_width.map(|h| (0..h).map(|j| (self.phi[j] + self.phi[h + j]).tanh()).collect())
    }

    pub fn logits(&self) -> Vec<f64> {
        let out = self.output_width;
        match self.hidden_width {
            None => (0..out).map(|k| self.phi[k] + self.phi[out + k]).collect(),
            Some(h) => {
                let a = self.hidden().expect("hidden layer");
                let w2 = &self.phi[2 * h..2 * h + out * h];
                let b2 = &self.phi[2 * h + out * h..];
                (0..out)
                    .map(|k| w2[k * h..(k + 1) * h].iter().zip(&a).map(|(w, x)| w * x).sum::<f64>() + b2[k])
                    .collect()
            }
        }
    }

    /// Gradient with respect to Φ of `sum_k dlogits[k] * logits[k]`.
    fn backprop(&self, dlogits: &[f64]) -> Vec<f64> {
        let out = self.output_width;
        let mut g = vec![0.0; self.phi.len()];
        match self.hidden_width {
            None => {
                g[..out].copy_from_slice(dlogits);
                g[out..].copy_from_slice(dlogits);
            }
            Some(h) => {
                let a = self.hidden().expect("hidden layer");
                let w2 = &self.phi[2 * h..2 * h + out * h];
                let mut da = vec![0.0; h];
                for k in 0..out {
                    for j in 0..h {
                        g[2 * h + k * h + j] = dlogits[k] * a[j];
                        da[j] += w2[k * h + j] * dlogits[k];
                    }
                    g[2 * h + out * h + k] = dlogits[k];
                }
                for j in 0..h {
                    let dz = da[j] * (1.0 - a[j] * a[j]);
                    g[j] = dz;
                    g[h + j] = dz;
                }
            }
        }
        g
    }
}

/// One sampled operator sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    /// Operator index per node, into the node's alphabet.
    pub indices: Vec<usize>,
    pub ops: OperatorSequence,
    /// `ln p_i(e_i)` under the policy, also for exploratory choices.
    pub log_probs: Vec<f64>,
    pub explored: Vec<bool>,
}

impl SampledSequence {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub sequences: Vec<SampledSequence>,
}

/// Lower empirical `(1 - ν)`-quantile: the `ceil((1-ν) N)`-th smallest score, at least the first.
pub fn quantile_threshold(scores: &[f64], nu: f64) -> f64 {
    assert!(!scores.is_empty(), "quantile of an empty batch");
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((1.0 - nu) * s.len() as f64).ceil() as usize;
    s[k.clamp(1, s.len()) - 1]
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone)]
pub struct Controller {
    params: ControllerParams,
    arities: Vec<Arity>,
    offsets: Vec<usize>,
    set: OperatorSet,
    template: TreeTemplate,
    adam: AdamState,
}

impl Controller {
    pub fn new(template: &TreeTemplate, set: &OperatorSet, cfg: &ControllerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let arities: Vec<Arity> = template.nodes().iter().map(|n| n.arity).collect();
        let mut offsets = Vec::with_capacity(arities.len());
        let mut width = 0;
        for &a in &arities {
            offsets.push(width);
            width += set.width(a);
        }
        let params = ControllerParams::init(width, cfg.hidden_width, rng);
        let adam = AdamState::new(params.phi.len(), cfg.learning_rate);
        Ok(Self { params, arities, offsets, set: set.clone(), template: template.clone(), adam })
    }

    /// Replaces Φ (and restarts the optimizer state).
    pub fn with_params(mut self, params: ControllerParams) -> Result<Self> {
        if params.output_width != self.output_width() {
            return Err(FexError::DimensionMismatch { expected: self.output_width(), got: params.output_width });
        }
        self.adam = AdamState::new(params.phi.len(), self.adam.lr());
        self.params = params;
        Ok(self)
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn output_width(&self) -> usize {
        self.params.output_width
    }

    pub fn operator_set(&self) -> &OperatorSet {
        &self.set
    }

    fn checked_logits(&self) -> Result<Vec<f64>> {
        let z = self.params.logits();
        if z.iter().all(|v| v.is_finite()) {
            Ok(z)
        } else {
            Err(FexError::NonFinite("controller logits"))
        }
    }

    fn split(&self, z: &[f64]) -> Vec<Vec<f64>> {
        self.arities
            .iter()
            .zip(&self.offsets)
            .map(|(&a, &o)| softmax(&z[o..o + self.set.width(a)]))
            .collect()
    }

    /// One pmf per template node.
    pub fn node_distributions(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.split(&self.checked_logits()?))
    }

    pub fn log_prob(&self, indices: &[usize]) -> Result<f64> {
        let pmfs = self.node_distributions()?;
        Ok(pmfs.iter().zip(indices).map(|(p, &i)| p[i].ln()).sum())
    }

    /// Draws `n` sequences; each node is uniform with probability `epsilon`, else from its pmf.
    pub fn sample_sequences(&self, n: usize, epsilon: f64, rng: &mut Rng) -> Result<SampledBatch> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(FexError::Config(format!("ε must satisfy 0 ≤ ε < 1, got {epsilon}")));
        }
        let pmfs = self.node_distributions()?;
        let dists: Vec<WeightedIndex<f64>> =
            pmfs.iter().map(|p| WeightedIndex::new(p).expect("softmax weights")).collect();
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let mut indices = Vec::with_capacity(pmfs.len());
            let mut log_probs = Vec::with_capacity(pmfs.len());
            let mut explored = Vec::with_capacity(pmfs.len());
            for (p, dist) in pmfs.iter().zip(&dists) {
                let uniform = rng.gen::<f64>() < epsilon;
                let i = if uniform { rng.gen_range(0..p.len()) } else { dist.sample(rng) };
                indices.push(i);
                log_probs.push(p[i].ln());
                explored.push(uniform);
            }
            let ops = OperatorSequence::from_indices(&self.template, &self.set, &indices)?;
            sequences.push(SampledSequence { indices, ops, log_probs, explored });
        }
        Ok(SampledBatch { sequences })
    }

    /// Per-sequence weights of the estimator: `S - Ŝ` above the threshold (risk-seeking) or `S`.
    pub fn weights(scores: &[f64], nu: f64, risk_seeking: bool) -> Vec<f64> {
        if !risk_seeking {
            return scores.to_vec();
        }
        let t = quantile_threshold(scores, nu);
        scores.iter().map(|&s| if s >= t { s - t } else { 0.0 }).collect()
    }

    /// Ascent direction `(1/N) sum_k w_k sum_i grad ln p_i(e_i^k)`.
    pub fn policy_gradient(&self, batch: &SampledBatch, scores: &[f64], nu: f64, risk_seeking: bool) -> Result<Vec<f64>> {
        if scores.len() != batch.sequences.len() {
            return Err(FexError::DimensionMismatch { expected: batch.sequences.len(), got: scores.len() });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(FexError::NonFinite("controller scores"));
        }
        let z = self.checked_logits()?;
        let pmfs = self.split(&z);
        let w = Self::weights(scores, nu, risk_seeking);
        let n = scores.len() as f64;
        let mut dz = vec![0.0; z.len()];
        for (seq, &wk) in batch.sequences.iter().zip(&w) {
            if wk == 0.0 {
                continue;
            }
            for (node, &c) in seq.indices.iter().enumerate() {
                let o = self.offsets[node];
                for (j, &pj) in pmfs[node].iter().enumerate() {
                    let ind = if j == c { 1.0 } else { 0.0 };
                    dz[o + j] += wk / n * (ind - pj);
                }
            }
        }
        Ok(self.params.backprop(&dz))
    }

    /// Surrogate `(1/N) sum_k w_k ln p(e^k)` at the current Φ, with weights from `scores`.
    pub fn surrogate(&self, batch: &SampledBatch, scores: &[f64], nu: f64, risk_seeking: bool) -> Result<f64> {
        let w = Self::weights(scores, nu, risk_seeking);
        let mut s = 0.0;
        for (seq, wk) in batch.sequences.iter().zip(&w) {
            s += wk * self.log_prob(&seq.indices)?;
        }
        Ok(s / scores.len() as f64)
    }

    /// One Adam ascent step on the estimator. Returns the gradient that was applied.
    pub fn policy_gradient_update(&mut self, batch: &SampledBatch, scores: &[f64], nu: f64, risk_seeking: bool) -> Result<Vec<f64>> {
        let g = self.policy_gradient(batch, scores, nu, risk_seeking)?;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut phi = self.params.phi.clone();
        self.adam.step(&mut phi, &neg)?;
        let before = std::mem::replace(&mut self.params.phi, phi);
        if let Err(e) = self.checked_logits() {
            self.params.phi = before;
            return Err(e);
        }
        Ok(g)
    }
}
