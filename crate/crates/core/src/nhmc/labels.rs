//! Binary feature labels (Small / Large) by Viterbi decoding.

use serde::{Deserialize, Serialize};

use super::{log_normal, log_sum_exp, NhmcModel, NhmcOffsetModel};
use crate::error::{Error, Result};
use crate::wavelet::WaveletMatrix;

/// How hidden states are turned into feature labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Merge the Large states into one, then decode the 2-state chain.
    #[default]
    Merged,
    /// Decode the full k-state chain, then map states > 0 to Large.
    FullViterbi,
}

/// `n_s × L` binary matrix; `1` marks a Large coefficient.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLabelMatrix {
    n_scales: usize,
    n_offsets: usize,
    labels: Vec<u8>,
}

impl FeatureLabelMatrix {
    pub fn new(n_scales: usize, n_offsets: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n_scales * n_offsets {
            return Err(Error::dim("feature labels", n_scales * n_offsets, labels.len()));
        }
        if labels.iter().any(|&b| b > 1) {
            return Err(Error::invalid("feature labels must be 0 or 1"));
        }
        Ok(Self {
            n_scales,
            n_offsets,
            labels,
        })
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    pub fn n_offsets(&self) -> usize {
        self.n_offsets
    }

    pub fn get(&self, s: usize, l: usize) -> u8 {
        self.labels[s * self.n_offsets + l]
    }

    /// Flattened labels, scale-major: index `s * L + l`.
    pub fn as_flat(&self) -> &[u8] {
        &self.labels
    }

    pub fn count_large(&self) -> usize {
        self.labels.iter().map(|&b| b as usize).sum()
    }
}

/// Two-state (Small / Large) chain for one offset.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedChain {
    /// `[p(Small), p(Large)]` at the finest scale.
    pub prior: [f64; 2],
    /// `transitions[s][from][to]` between scale `s` and `s+1`.
    pub transitions: Vec<[[f64; 2]; 2]>,
    /// Small-state variance per scale.
    pub small_var: Vec<f64>,
    /// Mixture weights of the Large states per scale (sum to 1).
    pub large_weights: Vec<Vec<f64>>,
    /// Variances of the Large states per scale.
    pub large_vars: Vec<Vec<f64>>,
}

fn normalized_or_uniform(v: &[f64]) -> Vec<f64> {
    let t: f64 = v.iter().sum();
    if t > 0.0 {
        v.iter().map(|x| x / t).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

impl MergedChain {
    /// Merges states `1..k` of `m`, weighting by the propagated state
    /// marginals.
    pub fn from_offset(m: &NhmcOffsetModel) -> Self {
        let k = m.k;
        let n_scales = m.n_scales();
        let marg = m.state_marginals();
        let groups: [Vec<usize>; 2] = [vec![0], (1..k).collect()];
        let prior = [m.initial_probs[0], m.initial_probs[1..].iter().sum()];
        let mut transitions = Vec::with_capacity(n_scales.saturating_sub(1));
        for s in 0..n_scales.saturating_sub(1) {
            let mut t = [[0.0; 2]; 2];
            for (from, src) in groups.iter().enumerate() {
                let weights = normalized_or_uniform(&src.iter().map(|&i| marg[s][i]).collect::<Vec<_>>());
                for (to, dst) in groups.iter().enumerate() {
                    t[from][to] = src
                        .iter()
                        .zip(&weights)
                        .map(|(&i, w)| w * dst.iter().map(|&j| m.transition(s, i, j)).sum::<f64>())
                        .sum();
                }
            }
            transitions.push(t);
        }
        Self {
            prior,
            transitions,
            small_var: (0..n_scales).map(|s| m.variances[s][0]).collect(),
            large_weights: (0..n_scales).map(|s| normalized_or_uniform(&marg[s][1..])).collect(),
            large_vars: (0..n_scales).map(|s| m.variances[s][1..].to_vec()).collect(),
        }
    }

    pub fn n_scales(&self) -> usize {
        self.small_var.len()
    }

    /// Log emission density of `w` at scale `s` for label `label`.
    pub fn log_emission(&self, s: usize, w: f64, label: u8) -> f64 {
        if label == 0 {
            return log_normal(w, self.small_var[s]);
        }
        let terms: Vec<f64> = self.large_weights[s]
            .iter()
            .zip(&self.large_vars[s])
            .map(|(p, v)| p.ln() + log_normal(w, *v))
            .collect();
        log_sum_exp(&terms)
    }

    /// Most probable label path; ties go to Small.
    pub fn viterbi(&self, column: &[f64]) -> Vec<u8> {
        let n = self.n_scales();
        if self.large_vars.first().map_or(true, Vec::is_empty) {
            return vec![0; n];
        }
        let mut delta = [0.0; 2];
        for b in 0..2 {
            delta[b] = self.prior[b].ln() + self.log_emission(0, column[0], b as u8);
        }
        let mut back = vec![[0u8; 2]; n];
        for s in 1..n {
            let t = &self.transitions[s - 1];
            let mut next = [0.0; 2];
            for to in 0..2 {
                let from_small = delta[0] + t[0][to].ln();
                let from_large = delta[1] + t[1][to].ln();
                let (best, arg) = if from_large > from_small {
                    (from_large, 1)
                } else {
                    (from_small, 0)
                };
                next[to] = best + self.log_emission(s, column[s], to as u8);
                back[s][to] = arg;
            }
            delta = next;
        }
        let mut path = vec![0u8; n];
        path[n - 1] = u8::from(delta[1] > delta[0]);
        for s in (1..n).rev() {
            path[s - 1] = back[s][path[s] as usize];
        }
        path
    }
}

/// Full k-state Viterbi with states > 0 mapped to Large; ties go to the
/// lower state index.
fn full_viterbi(m: &NhmcOffsetModel, column: &[f64]) -> Vec<u8> {
    let k = m.k;
    let n = m.n_scales();
    let mut delta: Vec<f64> = (0..k)
        .map(|i| m.initial_probs[i].ln() + log_normal(column[0], m.variances[0][i]))
        .collect();
    let mut back = vec![vec![0usize; k]; n];
    for s in 1..n {
        let next: Vec<f64> = (0..k)
            .map(|j| {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (i, d) in delta.iter().enumerate() {
                    let v = d + m.transition(s - 1, i, j).ln();
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                back[s][j] = arg;
                best + log_normal(column[s], m.variances[s][j])
            })
            .collect();
        delta = next;
    }
    let mut state = 0;
    for (i, d) in delta.iter().enumerate() {
        if *d > delta[state] {
            state = i;
        }
    }
    let mut path = vec![0u8; n];
    for s in (0..n).rev() {
        path[s] = u8::from(state > 0);
        if s > 0 {
            state = back[s][state];
        }
    }
    path
}

/// Precomputed decoder for a trained model.
#[derive(Debug, Clone)]
pub struct Labeler<'a> {
    model: &'a NhmcModel,
    mode: LabelMode,
    merged: Vec<MergedChain>,
}

impl<'a> Labeler<'a> {
    pub fn new(model: &'a NhmcModel, mode: LabelMode) -> Self {
        let merged = match mode {
            LabelMode::Merged => model.offsets.iter().map(MergedChain::from_offset).collect(),
            LabelMode::FullViterbi => Vec::new(),
        };
        Self { model, mode, merged }
    }

    pub fn model(&self) -> &NhmcModel {
        self.model
    }

    pub fn label(&self, w: &WaveletMatrix) -> Result<FeatureLabelMatrix> {
        self.model.check_shape(w)?;
        let (n_scales, n_offsets) = (self.model.n_scales, self.model.n_offsets());
        let mut labels = vec![0u8; n_scales * n_offsets];
        for l in 0..n_offsets {
            let column = w.column(l);
            let path = match self.mode {
                LabelMode::Merged => self.merged[l].viterbi(&column),
                LabelMode::FullViterbi => full_viterbi(&self.model.offsets[l], &column),
            };
            for (s, b) in path.into_iter().enumerate() {
                labels[s * n_offsets + l] = b;
            }
        }
        FeatureLabelMatrix::new(n_scales, n_offsets, labels)
    }
}

/// Decodes the feature labels of one wavelet matrix with the merged chain.
pub fn label_features(model: &NhmcModel, w: &WaveletMatrix) -> Result<FeatureLabelMatrix> {
    Labeler::new(model, LabelMode::Merged).label(w)
}
