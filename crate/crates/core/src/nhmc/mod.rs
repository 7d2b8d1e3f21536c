//! k-state mixture-of-Gaussians non-homogeneous hidden Markov chains.
//!
//! One chain is fitted per wavelength offset. The chain runs across scales,
//! finest first; at scale `s` the hidden state `S_s ∈ {0..k}` selects a
//! zero-mean Gaussian with variance `σ²_{s,i}`. Transitions between scale
//! `s` and `s+1` are scale-specific. State 0 is always the smallest-variance
//! state at its scale.

mod labels;

pub use labels::{label_features, FeatureLabelMatrix, LabelMode, Labeler, MergedChain};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::{MotherWavelet, WaveletMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian log-density of `w` under `N(0, var)`.
#[inline]
pub(crate) fn log_normal(w: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + w * w / var)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// EM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Relative log-likelihood change that ends training.
    pub tol: f64,
    pub max_iters: usize,
    /// Variance floor as a multiple of the per-offset mean squared
    /// coefficient (plus 1e-12).
    pub variance_floor: f64,
    /// Initial self-transition probability.
    pub init_self_transition: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 200,
            variance_floor: 1e-8,
            init_self_transition: 0.8,
        }
    }
}

/// Chain parameters for one wavelength offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NhmcOffsetModel {
    pub k: usize,
    /// `p(S_1 = i)`.
    pub initial_probs: Vec<f64>,
    /// One `k × k` column-stochastic matrix per scale transition, stored
    /// row-major: entry `[j * k + i] = p(S_{s+1} = j | S_s = i)`.
    pub transitions: Vec<Vec<f64>>,
    /// `variances[s][i] = σ²_{s,i}`.
    pub variances: Vec<Vec<f64>>,
}

impl NhmcOffsetModel {
    pub fn n_scales(&self) -> usize {
        self.variances.len()
    }

    /// `p(S_{s+1} = to | S_s = from)`.
    #[inline]
    pub fn transition(&self, s: usize, from: usize, to: usize) -> f64 {
        self.transitions[s][to * self.k + from]
    }

    /// Marginal state probabilities `p_s = A_{s-1} p_{s-1}` for every scale.
    pub fn state_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.initial_probs.clone()];
        for s in 0..self.n_scales() - 1 {
            let prev = &out[s];
            let next = (0..self.k)
                .map(|j| (0..self.k).map(|i| self.transition(s, i, j) * prev[i]).sum())
                .collect();
            out.push(next);
        }
        out
    }

    /// Chain log-density of one coefficient column via the log-domain
    /// forward recursion.
    pub fn log_likelihood(&self, column: &[f64]) -> f64 {
        let k = self.k;
        let mut alpha: Vec<f64> = (0..k)
            .map(|i| self.initial_probs[i].ln() + log_normal(column[0], self.variances[0][i]))
            .collect();
        let mut terms = vec![0.0; k];
        for s in 1..self.n_scales() {
            let next: Vec<f64> = (0..k)
                .map(|j| {
                    for i in 0..k {
                        terms[i] = alpha[i] + self.transition(s - 1, i, j).ln();
                    }
                    log_sum_exp(&terms) + log_normal(column[s], self.variances[s][j])
                })
                .collect();
            alpha = next;
        }
        log_sum_exp(&alpha)
    }

    /// Checks stochasticity and variance ordering.
    pub fn check_invariants(&self, floor: f64) -> Result<()> {
        let k = self.k;
        let sum: f64 = self.initial_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("initial probabilities sum to {sum}")));
        }
        for (s, a) in self.transitions.iter().enumerate() {
            for i in 0..k {
                let col: f64 = (0..k).map(|j| a[j * k + i]).sum();
                if (col - 1.0).abs() > 1e-10 || (0..k).any(|j| !(0.0..=1.0).contains(&a[j * k + i])) {
                    return Err(Error::invalid(format!("transition {s} column {i} is not stochastic")));
                }
            }
        }
        for (s, v) in self.variances.iter().enumerate() {
            if v.windows(2).any(|p| p[1] < p[0]) {
                return Err(Error::invalid(format!("variances at scale {s} are not ascending")));
            }
            if v.iter().any(|&x| x < floor) {
                return Err(Error::invalid(format!("variance below floor at scale {s}")));
            }
        }
        Ok(())
    }
}

/// Training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingReport {
    /// EM iterations run per offset.
    pub iterations: Vec<usize>,
    /// Final per-offset training log-likelihood.
    pub final_log_likelihood: Vec<f64>,
    /// Offsets whose coefficients were identically zero.
    pub degenerate_offsets: Vec<usize>,
    /// Variance floor used per offset.
    pub variance_floors: Vec<f64>,
    /// Per-offset log-likelihood after each E-step. Not archived.
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

impl TrainingReport {
    pub fn total_log_likelihood(&self) -> f64 {
        self.final_log_likelihood.iter().sum()
    }
}

/// A trained set of per-offset chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NhmcModel {
    pub k: usize,
    pub n_scales: usize,
    pub mother: MotherWavelet,
    pub offsets: Vec<NhmcOffsetModel>,
    pub report: TrainingReport,
}

impl NhmcModel {
    pub fn n_offsets(&self) -> usize {
        self.offsets.len()
    }

    pub(crate) fn check_shape(&self, w: &WaveletMatrix) -> Result<()> {
        if w.n_scales() != self.n_scales {
            return Err(Error::dim("wavelet scales", self.n_scales, w.n_scales()));
        }
        if w.n_offsets() != self.n_offsets() {
            return Err(Error::dim("wavelet offsets", self.n_offsets(), w.n_offsets()));
        }
        Ok(())
    }
}

/// Sum over offsets of the chain log-density of each coefficient column.
pub fn log_likelihood(model: &NhmcModel, w: &WaveletMatrix) -> Result<f64> {
    model.check_shape(w)?;
    Ok(model
        .offsets
        .iter()
        .enumerate()
        .map(|(l, m)| m.log_likelihood(&w.column(l)))
        .sum())
}

/// Fits one chain per offset by EM.
pub fn train_nhmc(training: &[WaveletMatrix], k: usize, config: &EmConfig) -> Result<NhmcModel> {
    if training.len() < 2 {
        return Err(Error::invalid("NHMC training needs at least 2 wavelet matrices"));
    }
    if k < 2 {
        return Err(Error::invalid("NHMC needs at least 2 states"));
    }
    let first = &training[0];
    let (n_scales, n_offsets) = (first.n_scales(), first.n_offsets());
    for w in training {
        if w.n_scales() != n_scales {
            return Err(Error::dim("training wavelet scales", n_scales, w.n_scales()));
        }
        if w.n_offsets() != n_offsets {
            return Err(Error::dim("training wavelet offsets", n_offsets, w.n_offsets()));
        }
    }
    let fits: Vec<OffsetFit> = (0..n_offsets)
        .into_par_iter()
        .map(|l| {
            let mut chains = Vec::with_capacity(training.len() * n_scales);
            for w in training {
                chains.extend((0..n_scales).map(|s| w.get(s, l)));
            }
            fit_offset(&chains, n_scales, k, config)
        })
        .collect();
    let mut report = TrainingReport::default();
    let mut offsets = Vec::with_capacity(n_offsets);
    for (l, fit) in fits.into_iter().enumerate() {
        report.iterations.push(fit.trace.len());
        report.final_log_likelihood.push(*fit.trace.last().unwrap_or(&f64::NAN));
        report.variance_floors.push(fit.floor);
        if fit.degenerate {
            report.degenerate_offsets.push(l);
        }
        report.traces.push(fit.trace);
        offsets.push(fit.model);
    }
    Ok(NhmcModel {
        k,
        n_scales,
        mother: first.mother(),
        offsets,
        report,
    })
}

struct OffsetFit {
    model: NhmcOffsetModel,
    trace: Vec<f64>,
    floor: f64,
    degenerate: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn initial_model(chains: &[f64], n_scales: usize, k: usize, floor: f64, config: &EmConfig) -> NhmcOffsetModel {
    let n = chains.len() / n_scales;
    let variances = (0..n_scales)
        .map(|s| {
            let mut mags: Vec<f64> = (0..n).map(|c| chains[c * n_scales + s].abs()).collect();
            mags.sort_by(f64::total_cmp);
            (0..k)
                .map(|i| {
                    let q = quantile(&mags, (i + 1) as f64 / (k + 1) as f64);
                    (q * q).max(floor)
                })
                .collect()
        })
        .collect();
    let off = (1.0 - config.init_self_transition) / (k - 1) as f64;
    let a: Vec<f64> = (0..k * k)
        .map(|idx| if idx / k == idx % k { config.init_self_transition } else { off })
        .collect();
    NhmcOffsetModel {
        k,
        initial_probs: vec![1.0 / k as f64; k],
        transitions: vec![a; n_scales - 1],
        variances,
    }
}

/// Sufficient statistics of one E-step.
struct Stats {
    gamma1: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    gamma_w2: Vec<Vec<f64>>,
    xi: Vec<Vec<f64>>,
    ll: f64,
}

fn e_step(m: &NhmcOffsetModel, chains: &[f64], n_scales: usize) -> Stats {
    let k = m.k;
    let n = chains.len() / n_scales;
    let mut st = Stats {
        gamma1: vec![0.0; k],
        gamma: vec![vec![0.0; k]; n_scales],
        gamma_w2: vec![vec![0.0; k]; n_scales],
        xi: vec![vec![0.0; k * k]; n_scales.saturating_sub(1)],
        ll: 0.0,
    };
    let mut b = vec![0.0; n_scales * k];
    let mut alpha = vec![0.0; n_scales * k];
    let mut beta = vec![0.0; n_scales * k];
    let mut scale = vec![0.0; n_scales];
    for c in 0..n {
        let w = &chains[c * n_scales..(c + 1) * n_scales];
        let mut ll = 0.0;
        for s in 0..n_scales {
            let row = &mut b[s * k..(s + 1) * k];
            let mut mx = f64::NEG_INFINITY;
            for i in 0..k {
                row[i] = log_normal(w[s], m.variances[s][i]);
                mx = mx.max(row[i]);
            }
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
            }
            ll += mx;
        }
        // forward
        let mut underflow = false;
        for s in 0..n_scales {
            let mut total = 0.0;
            for j in 0..k {
                let pred = if s == 0 {
                    m.initial_probs[j]
                } else {
                    (0..k).map(|i| alpha[(s - 1) * k + i] * m.transition(s - 1, i, j)).sum()
                };
                let v = pred * b[s * k + j];
                alpha[s * k + j] = v;
                total += v;
            }
            if !(total > 0.0) || !total.is_finite() {
                underflow = true;
                break;
            }
            for j in 0..k {
                alpha[s * k + j] /= total;
            }
            scale[s] = total;
            ll += total.ln();
        }
        if underflow {
            // Probability-domain recursion lost all mass; the chain contributes
            // through the exact log-domain likelihood only.
            st.ll += m.log_likelihood(w);
            continue;
        }
        st.ll += ll;
        // backward
        for i in 0..k {
            beta[(n_scales - 1) * k + i] = 1.0;
        }
        for s in (0..n_scales - 1).rev() {
            for i in 0..k {
                let v: f64 = (0..k)
                    .map(|j| m.transition(s, i, j) * b[(s + 1) * k + j] * beta[(s + 1) * k + j])
                    .sum();
                beta[s * k + i] = v / scale[s + 1];
            }
        }
        for s in 0..n_scales {
            for i in 0..k {
                let g = alpha[s * k + i] * beta[s * k + i];
                st.gamma[s][i] += g;
                st.gamma_w2[s][i] += g * w[s] * w[s];
                if s == 0 {
                    st.gamma1[i] += g;
                }
            }
            if s + 1 < n_scales {
                let inv = 1.0 / scale[s + 1];
                for i in 0..k {
                    let ai = alpha[s * k + i] * inv;
                    for j in 0..k {
                        st.xi[s][j * k + i] +=
                            ai * m.transition(s, i, j) * b[(s + 1) * k + j] * beta[(s + 1) * k + j];
                    }
                }
            }
        }
    }
    st
}

fn m_step(m: &mut NhmcOffsetModel, st: &Stats, floor: f64) {
    let k = m.k;
    let g1: f64 = st.gamma1.iter().sum();
    if g1 > 0.0 {
        for i in 0..k {
            m.initial_probs[i] = st.gamma1[i] / g1;
        }
    }
    for (s, a) in m.transitions.iter_mut().enumerate() {
        for i in 0..k {
            let denom: f64 = (0..k).map(|j| st.xi[s][j * k + i]).sum();
            if denom > 0.0 {
                for j in 0..k {
                    a[j * k + i] = st.xi[s][j * k + i] / denom;
                }
            }
        }
    }
    for s in 0..m.variances.len() {
        for i in 0..k {
            let g = st.gamma[s][i];
            if g > 1e-300 {
                m.variances[s][i] = (st.gamma_w2[s][i] / g).max(floor);
            }
        }
    }
    sort_states_by_variance(m);
}

/// Relabels the states at every scale so variances ascend. Each scale's
/// labels are independent in a non-homogeneous chain, so this leaves the
/// modelled distribution unchanged.
pub(crate) fn sort_states_by_variance(m: &mut NhmcOffsetModel) {
    let k = m.k;
    for s in 0..m.variances.len() {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.sort_by(|&a, &b| m.variances[s][a].total_cmp(&m.variances[s][b]));
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            continue;
        }
        m.variances[s] = perm.iter().map(|&p| m.variances[s][p]).collect();
        if s == 0 {
            m.initial_probs = perm.iter().map(|&p| m.initial_probs[p]).collect();
        }
        if s > 0 {
            // rows (destination states) of the incoming transition
            let a = &m.transitions[s - 1];
            let mut next = vec![0.0; k * k];
            for (j_new, &j_old) in perm.iter().enumerate() {
                for i in 0..k {
                    next[j_new * k + i] = a[j_old * k + i];
                }
            }
            m.transitions[s - 1] = next;
        }
        if s + 1 < m.variances.len() {
            // columns (source states) of the outgoing transition
            let a = &m.transitions[s];
            let mut next = vec![0.0; k * k];
            for j in 0..k {
                for (i_new, &i_old) in perm.iter().enumerate() {
                    next[j * k + i_new] = a[j * k + i_old];
                }
            }
            m.transitions[s] = next;
        }
    }
}

fn fit_offset(chains: &[f64], n_scales: usize, k: usize, config: &EmConfig) -> OffsetFit {
    let mean_sq = chains.iter().map(|w| w * w).sum::<f64>() / chains.len() as f64;
    let floor = config.variance_floor * (mean_sq + 1e-12);
    let degenerate = chains.iter().all(|&w| w == 0.0);
    let mut model = initial_model(chains, n_scales, k, floor, config);
    sort_states_by_variance(&mut model);
    let mut trace = Vec::new();
    for it in 0..config.max_iters.max(1) {
        let st = e_step(&model, chains, n_scales);
        let ll = st.ll;
        trace.push(ll);
        if it > 0 {
            let prev = trace[trace.len() - 2];
            if (ll - prev).abs() <= config.tol * prev.abs().max(1e-300) {
                break;
            }
        }
        if it + 1 == config.max_iters {
            break;
        }
        m_step(&mut model, &st, floor);
    }
    OffsetFit {
        model,
        trace,
        floor,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_offset_model(k: usize, n_scales: usize, r: &mut rng::Rng) -> NhmcOffsetModel {
        let simplex = |r: &mut rng::Rng| {
            let v: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect::<Vec<_>>()
        };
        let transitions = (0..n_scales - 1)
            .map(|_| {
                let cols: Vec<Vec<f64>> = (0..k).map(|_| simplex(r)).collect();
                (0..k * k).map(|idx| cols[idx % k][idx / k]).collect()
            })
            .collect();
        let variances = (0..n_scales)
            .map(|_| {
                let mut v: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..4.0)).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        NhmcOffsetModel {
            k,
            initial_probs: simplex(r),
            transitions,
            variances,
        }
    }

    /// Enumerates every state path.
    fn brute_force_ll(m: &NhmcOffsetModel, w: &[f64]) -> f64 {
        let n = w.len();
        let total_paths = m.k.pow(n as u32);
        let mut total = 0.0;
        for code in 0..total_paths {
            let path: Vec<usize> = (0..n).map(|s| code / m.k.pow(s as u32) % m.k).collect();
            let mut p = m.initial_probs[path[0]] * log_normal(w[0], m.variances[0][path[0]]).exp();
            for s in 1..n {
                p *= m.transition(s - 1, path[s - 1], path[s]) * log_normal(w[s], m.variances[s][path[s]]).exp();
            }
            total += p;
        }
        total.ln()
    }

    #[test]
    fn forward_matches_path_enumeration() {
        let mut r = rng::from_seed(3);
        for _ in 0..100 {
            let m = random_offset_model(2, 3, &mut r);
            let w: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
            assert!((m.log_likelihood(&w) - brute_force_ll(&m, &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_state_chain_is_sum_of_gaussians() {
        let m = NhmcOffsetModel {
            k: 1,
            initial_probs: vec![1.0],
            transitions: vec![vec![1.0]; 2],
            variances: vec![vec![0.5], vec![2.0], vec![1.5]],
        };
        let w = [0.3, -1.2, 0.7];
        let expect: f64 = w.iter().zip(&m.variances).map(|(x, v)| log_normal(*x, v[0])).sum();
        assert!((m.log_likelihood(&w) - expect).abs() < 1e-12);
    }

    #[test]
    fn relabeling_preserves_likelihood() {
        let mut r = rng::from_seed(8);
        for _ in 0..20 {
            let mut m = random_offset_model(3, 4, &mut r);
            for v in &mut m.variances {
                v.reverse();
            }
            let w: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
            let before = m.log_likelihood(&w);
            sort_states_by_variance(&mut m);
            assert!((before - m.log_likelihood(&w)).abs() < 1e-12);
            m.check_invariants(0.0).unwrap();
        }
    }

    fn matrices_from_chains(chains: &[Vec<f64>]) -> Vec<WaveletMatrix> {
        chains
            .iter()
            .map(|c| WaveletMatrix::from_rows(c.iter().map(|v| vec![*v]).collect(), MotherWavelet::Haar).unwrap())
            .collect()
    }

    #[test]
    fn recovers_well_separated_variances() {
        // Sample from a known 2-state chain: variances 0.01 and 1.0.
        let n_scales = 6;
        let truth_var: [f64; 2] = [0.01, 1.0];
        let stay = 0.85;
        let mut r = rng::from_seed(21);
        let chains: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let mut state = usize::from(r.gen_bool(0.4));
                (0..n_scales)
                    .map(|s| {
                        if s > 0 && !r.gen_bool(stay) {
                            state = 1 - state;
                        }
                        let z: f64 = StandardNormal.sample(&mut r);
                        z * truth_var[state].sqrt()
                    })
                    .collect()
            })
            .collect();
        let model = train_nhmc(&matrices_from_chains(&chains), 2, &EmConfig::default()).unwrap();
        let m = &model.offsets[0];
        // Every scale shares the true variances, so the per-scale estimates
        // are pooled; a single scale sees only ~300 Small draws.
        for (i, t) in truth_var.iter().enumerate() {
            let mean = (0..n_scales).map(|s| m.variances[s][i]).sum::<f64>() / n_scales as f64;
            assert!((mean - t).abs() / t < 0.2, "state {i}: {mean} vs {t}");
            for s in 0..n_scales {
                assert!((m.variances[s][i] - t).abs() / t < 0.35);
            }
        }
    }

    #[test]
    fn em_is_monotone_and_keeps_invariants() {
        let mut r = rng::from_seed(5);
        let chains: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..5).map(|s| r.gen_range(-1.0..1.0) * (s + 1) as f64).collect())
            .collect();
        for k in [2, 3, 4] {
            let model = train_nhmc(&matrices_from_chains(&chains), k, &EmConfig::default()).unwrap();
            let trace = &model.report.traces[0];
            assert!(trace.windows(2).all(|p| p[1] >= p[0] - 1e-9), "k={k}: {trace:?}");
            model.offsets[0].check_invariants(model.report.variance_floors[0]).unwrap();
        }
    }

    #[test]
    fn identical_zero_training_hits_floor() {
        let mats = matrices_from_chains(&vec![vec![0.0; 4]; 5]);
        let model = train_nhmc(&mats, 2, &EmConfig::default()).unwrap();
        assert_eq!(model.report.degenerate_offsets, vec![0]);
        let floor = model.report.variance_floors[0];
        assert!(model.offsets[0].variances.iter().all(|v| v[0] == floor));
    }

    #[test]
    fn training_preconditions() {
        let mats = matrices_from_chains(&[vec![0.1, 0.2]]);
        assert!(train_nhmc(&mats, 2, &EmConfig::default()).is_err());
        let mats = matrices_from_chains(&[vec![0.1, 0.2], vec![0.3, 0.1]]);
        assert!(train_nhmc(&mats, 1, &EmConfig::default()).is_err());
        let mut bad = mats.clone();
        bad.push(WaveletMatrix::from_rows(vec![vec![0.1]], MotherWavelet::Haar).unwrap());
        assert!(train_nhmc(&bad, 2, &EmConfig::default()).is_err());
    }
}
