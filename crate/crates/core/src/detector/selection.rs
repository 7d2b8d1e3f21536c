//! Negatively-correlated feature elimination and greedy conditional mutual
//! information selection.
//!
//! All information quantities are in bits and are computed from (optionally
//! add-α smoothed) count tables. Log ratios are formed from products of
//! counts, so exactly independent or duplicated features score exactly 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::FeatureDataset;
use crate::error::{Error, Result};

/// Scores at or below this are treated as zero.
pub const SCORE_EPS: f64 = 1e-12;

/// Empirical 2×2 joint `p(x, t)`, indexed `[x][t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMatrix {
    pub joint: [[f64; 2]; 2],
    pub alpha: f64,
    counts: [[f64; 2]; 2],
    total: f64,
}

impl ErrorMatrix {
    pub fn from_counts(counts: [[u64; 2]; 2], alpha: f64) -> Self {
        let c = counts.map(|row| row.map(|v| v as f64 + alpha));
        let total: f64 = c.iter().flatten().sum();
        Self {
            joint: c.map(|row| row.map(|v| v / total)),
            alpha,
            counts: c,
            total,
        }
    }

    /// `p(0,0) p(1,1) - p(0,1) p(1,0)`; the sign is exact for integer and
    /// half-integer smoothed counts.
    pub fn det(&self) -> f64 {
        let c = &self.counts;
        (c[0][0] * c[1][1] - c[0][1] * c[1][0]) / (self.total * self.total)
    }
}

/// Which conditioning set the selection score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CmiMode {
    /// `min_v I(t; x_n | x_v)` over the selected features.
    #[default]
    PairwiseMin,
    /// `I(t; x_n | V)` conditioned on the whole selected set. Exponential in
    /// `|V|` in the worst case; meant for small selections.
    FullSet,
}

/// Indices of features whose joint with the target has a strictly positive
/// determinant, ascending.
pub fn eliminate_negative_features(ds: &FeatureDataset, alpha: f64) -> Vec<usize> {
    (0..ds.n_features())
        .filter(|&f| ErrorMatrix::from_counts(ds.joint_counts(f), alpha).det() > 0.0)
        .collect()
}

/// `I(x; t)` from counts `[x][t]`.
pub fn mutual_information(counts: [[u64; 2]; 2], alpha: f64) -> f64 {
    let c = counts.map(|row| row.map(|v| v as f64 + alpha));
    let n: f64 = c.iter().flatten().sum();
    let cx = [c[0][0] + c[0][1], c[1][0] + c[1][1]];
    let ct = [c[0][0] + c[1][0], c[0][1] + c[1][1]];
    let mut mi = 0.0;
    for x in 0..2 {
        for t in 0..2 {
            if c[x][t] > 0.0 {
                mi += c[x][t] / n * ((c[x][t] * n) / (cx[x] * ct[t])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// `I(t; x | v)` from counts `[x][v][t]`.
pub fn conditional_mutual_information(counts: [[[u64; 2]; 2]; 2], alpha: f64) -> f64 {
    let c = counts.map(|a| a.map(|b| b.map(|v| v as f64 + alpha)));
    let n: f64 = c.iter().flatten().flatten().sum();
    let mut cmi = 0.0;
    for v in 0..2 {
        let cv: f64 = (0..2).flat_map(|x| (0..2).map(move |t| (x, t))).map(|(x, t)| c[x][v][t]).sum();
        for x in 0..2 {
            let cxv = c[x][v][0] + c[x][v][1];
            for t in 0..2 {
                let cxvt = c[x][v][t];
                if cxvt > 0.0 {
                    let cvt = c[0][v][t] + c[1][v][t];
                    cmi += cxvt / n * ((cxvt * cv) / (cxv * cvt)).log2();
                }
            }
        }
    }
    cmi.max(0.0)
}

/// `I(t; x_f | V)` conditioned on the joint pattern of `selected`.
fn full_set_cmi(ds: &FeatureDataset, f: usize, selected: &[usize], alpha: f64) -> f64 {
    // counts[pattern] = [x][t]
    let mut table: BTreeMap<Vec<u8>, [[f64; 2]; 2]> = BTreeMap::new();
    for i in 0..ds.n_samples() {
        let key: Vec<u8> = selected.iter().map(|&v| ds.value(i, v)).collect();
        table.entry(key).or_insert([[alpha; 2]; 2])[ds.value(i, f) as usize][ds.target_of(i) as usize] += 1.0;
    }
    let n: f64 = table.values().flat_map(|c| c.iter().flatten()).sum();
    let mut cmi = 0.0;
    for c in table.values() {
        let cv: f64 = c.iter().flatten().sum();
        for x in 0..2 {
            let cxv = c[x][0] + c[x][1];
            for t in 0..2 {
                if c[x][t] > 0.0 {
                    let cvt = c[0][t] + c[1][t];
                    cmi += c[x][t] / n * ((c[x][t] * cv) / (cxv * cvt)).log2();
                }
            }
        }
    }
    cmi.max(0.0)
}

/// Greedy selection of up to `k` features from `candidates`.
///
/// The first pick maximises `I(t; x_n)`; later picks maximise the
/// conditional score of `mode`. Selection stops early once the best score is
/// not positive. Ties go to the lowest feature index.
pub fn select_features_cmi(
    ds: &FeatureDataset,
    candidates: &[usize],
    k: usize,
    mode: CmiMode,
    alpha: f64,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::invalid("feature selection needs at least one candidate"));
    }
    let mut cands: Vec<usize> = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if let Some(&bad) = cands.iter().find(|&&f| f >= ds.n_features()) {
        return Err(Error::invalid(format!("candidate feature {bad} out of range")));
    }
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; cands.len()];
    let mut scores: Vec<f64> = cands.iter().map(|&f| mutual_information(ds.joint_counts(f), alpha)).collect();
    while selected.len() < k {
        let mut best: Option<usize> = None;
        for (pos, &score) in scores.iter().enumerate() {
            if taken[pos] {
                continue;
            }
            if best.map_or(true, |b| score > scores[b]) {
                best = Some(pos);
            }
        }
        let Some(pos) = best else { break };
        if scores[pos] <= SCORE_EPS {
            break;
        }
        taken[pos] = true;
        let picked = cands[pos];
        selected.push(picked);
        if selected.len() == k {
            break;
        }
        let first = selected.len() == 1;
        for (p, &f) in cands.iter().enumerate() {
            if taken[p] {
                continue;
            }
            match mode {
                CmiMode::PairwiseMin => {
                    let c = conditional_mutual_information(ds.triple_counts(f, picked), alpha);
                    scores[p] = if first { c } else { scores[p].min(c) };
                }
                CmiMode::FullSet => scores[p] = full_set_cmi(ds, f, &selected, alpha),
            }
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(cols: &[Vec<u8>], t: &[u8]) -> FeatureDataset {
        let rows: Vec<Vec<u8>> = (0..t.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let refs: Vec<&[u8]> = rows.iter().map(Vec::as_slice).collect();
        FeatureDataset::from_rows(&refs, t).unwrap()
    }

    #[test]
    fn elimination_keeps_aligned_drops_anti_and_independent() {
        let t = vec![1, 1, 0, 0, 0, 1, 0, 0, 0];
        let aligned = t.clone();
        let anti: Vec<u8> = t.iter().map(|v| 1 - v).collect();
        // product counts: p(x=1) = 1/3, p(t=1) = 1/3, c = [[4, 2], [2, 1]]
        let indep = vec![1, 0, 1, 0, 0, 0, 0, 0, 1];
        let ds = dataset(&[aligned, anti, indep], &t);
        assert_eq!(ds.joint_counts(2), [[4, 2], [2, 1]]);
        assert_eq!(ErrorMatrix::from_counts(ds.joint_counts(2), 0.0).det(), 0.0);
        assert_eq!(eliminate_negative_features(&ds, 0.0), vec![0]);
    }

    #[test]
    fn smoothed_determinant_by_hand() {
        // counts [[3, 1], [2, 4]] + 0.5 -> [[3.5, 1.5], [2.5, 4.5]] / 12
        let e = ErrorMatrix::from_counts([[3, 1], [2, 4]], 0.5);
        let expect = (3.5 * 4.5 - 1.5 * 2.5) / 144.0;
        assert!((e.det() - expect).abs() < 1e-15);
        assert!((e.joint.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_feature_has_zero_conditional_score() {
        let t = vec![1, 1, 0, 0, 1, 0, 1, 0];
        let x = vec![1, 0, 0, 0, 1, 1, 1, 0];
        let ds = dataset(&[x.clone(), x], &t);
        assert_eq!(conditional_mutual_information(ds.triple_counts(0, 1), 0.0), 0.0);
        let sel = select_features_cmi(&ds, &[0, 1], 2, CmiMode::PairwiseMin, 0.0).unwrap();
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn empty_candidates_error() {
        let ds = dataset(&[vec![0, 1]], &[0, 1]);
        assert!(select_features_cmi(&ds, &[], 3, CmiMode::PairwiseMin, 0.0).is_err());
    }

    #[test]
    fn full_set_matches_pairwise_for_one_conditioner() {
        let t = vec![1, 1, 0, 0, 1, 0, 1, 0, 1, 1];
        let cols = vec![
            vec![1, 1, 0, 0, 1, 0, 1, 1, 0, 1],
            vec![1, 0, 0, 1, 1, 0, 0, 0, 1, 1],
            vec![0, 1, 1, 0, 1, 0, 1, 0, 1, 0],
        ];
        let ds = dataset(&cols, &t);
        for f in [1, 2] {
            let pair = conditional_mutual_information(ds.triple_counts(f, 0), 0.0);
            let full = full_set_cmi(&ds, f, &[0], 0.0);
            assert!((pair - full).abs() < 1e-12);
        }
    }
}
