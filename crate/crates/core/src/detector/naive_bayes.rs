//! Bernoulli naive Bayes over a selected feature subset.

use serde::{Deserialize, Serialize};

use super::dataset::FeatureDataset;
use crate::error::{Error, Result};

/// One-vs-rest detector for a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub class_id: String,
    /// Ordered feature indices, most informative first.
    pub selected: Vec<usize>,
    /// `p(x_v = 1 | t = 1)` per selected feature.
    pub p_pos: Vec<f64>,
    /// `p(x_v = 1 | t = 0)` per selected feature.
    pub p_neg: Vec<f64>,
    /// `[p(t = 0), p(t = 1)]`.
    pub priors: [f64; 2],
}

impl DetectorModel {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// The detector restricted to its first `k` features. Parameters are
    /// estimated per feature, so a prefix is exactly the model trained on it.
    pub fn truncated(&self, k: usize) -> DetectorModel {
        let k = k.min(self.k());
        DetectorModel {
            class_id: self.class_id.clone(),
            selected: self.selected[..k].to_vec(),
            p_pos: self.p_pos[..k].to_vec(),
            p_neg: self.p_neg[..k].to_vec(),
            priors: self.priors,
        }
    }

    fn prior_margin(&self) -> f64 {
        self.priors[1].ln() - self.priors[0].ln()
    }

    fn feature_term(&self, j: usize, x: u8) -> f64 {
        let (p1, p0) = (self.p_pos[j], self.p_neg[j]);
        if x == 1 {
            p1.ln() - p0.ln()
        } else {
            (1.0 - p1).ln() - (1.0 - p0).ln()
        }
    }

    /// `log p(t=1 | x) - log p(t=0 | x)` on a flattened label row.
    pub fn margin(&self, flat: &[u8]) -> f64 {
        self.selected
            .iter()
            .enumerate()
            .fold(self.prior_margin(), |acc, (j, &f)| acc + self.feature_term(j, flat[f]))
    }

    /// Margins of every prefix model: element `i` uses the first `i` features.
    pub fn margin_curve(&self, flat: &[u8]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() + 1);
        let mut acc = self.prior_margin();
        out.push(acc);
        for (j, &f) in self.selected.iter().enumerate() {
            acc += self.feature_term(j, flat[f]);
            out.push(acc);
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.selected.len();
        if self.p_pos.len() != n || self.p_neg.len() != n {
            return Err(Error::dim("detector parameters", n, self.p_pos.len().min(self.p_neg.len())));
        }
        let mut seen = self.selected.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::invalid(format!("detector {} has repeated features", self.class_id)));
        }
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !self.p_pos.iter().chain(&self.p_neg).chain(&self.priors).all(|&p| open(p)) {
            return Err(Error::invalid(format!("detector {} has probabilities outside (0,1)", self.class_id)));
        }
        if (self.priors[0] + self.priors[1] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("detector {} priors do not sum to 1", self.class_id)));
        }
        Ok(())
    }
}

/// Add-α estimates of the class priors and per-feature Bernoulli parameters.
pub fn train_naive_bayes(ds: &FeatureDataset, selected: &[usize], class_id: &str, alpha: f64) -> Result<DetectorModel> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("naive Bayes smoothing must be positive"));
    }
    if let Some(&bad) = selected.iter().find(|&&f| f >= ds.n_features()) {
        return Err(Error::invalid(format!("selected feature {bad} out of range")));
    }
    let n = ds.n_samples() as f64;
    let n_pos = ds.n_positive() as f64;
    let n_neg = n - n_pos;
    let p1 = (n_pos + alpha) / (n + 2.0 * alpha);
    let mut p_pos = Vec::with_capacity(selected.len());
    let mut p_neg = Vec::with_capacity(selected.len());
    for &f in selected {
        let c = ds.joint_counts(f);
        p_pos.push((c[1][1] as f64 + alpha) / (n_pos + 2.0 * alpha));
        p_neg.push((c[1][0] as f64 + alpha) / (n_neg + 2.0 * alpha));
    }
    let model = DetectorModel {
        class_id: class_id.to_string(),
        selected: selected.to_vec(),
        p_pos,
        p_neg,
        priors: [1.0 - p1, p1],
    };
    model.check_invariants()?;
    Ok(model)
}
