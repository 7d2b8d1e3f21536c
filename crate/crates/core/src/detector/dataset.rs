//! Bit-packed binary feature datasets.

use crate::error::{Error, Result};
use crate::nhmc::FeatureLabelMatrix;

/// Binary column packed into 64-bit words; padding bits are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitColumn(Vec<u64>);

impl BitColumn {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    pub fn from_bits(bits: impl IntoIterator<Item = u8>) -> Self {
        let mut words = Vec::new();
        for (i, b) in bits.into_iter().enumerate() {
            if i % 64 == 0 {
                words.push(0);
            }
            if b != 0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self(words)
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        ((self.0[i / 64] >> (i % 64)) & 1) as u8
    }

    pub fn count(&self) -> u64 {
        self.0.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn and_count(&self, other: &BitColumn) -> u64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum()
    }

    pub fn and3_count(&self, b: &BitColumn, c: &BitColumn) -> u64 {
        self.0
            .iter()
            .zip(&b.0)
            .zip(&c.0)
            .map(|((x, y), z)| u64::from((x & y & z).count_ones()))
            .sum()
    }
}

/// `n_samples × N` binary feature matrix with a binary target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDataset {
    n_samples: usize,
    columns: Vec<BitColumn>,
    target: BitColumn,
}

impl FeatureDataset {
    /// Builds a dataset from row vectors of 0/1 values.
    pub fn from_rows(rows: &[&[u8]], target: &[u8]) -> Result<Self> {
        if rows.len() != target.len() {
            return Err(Error::dim("dataset targets", rows.len(), target.len()));
        }
        let n_features = rows.first().map_or(0, |r| r.len());
        let n = rows.len();
        let mut columns = vec![BitColumn::zeros(n); n_features];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_features {
                return Err(Error::dim("dataset row", n_features, row.len()));
            }
            for (f, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => columns[f].set(i),
                    _ => return Err(Error::invalid("feature values must be 0 or 1")),
                }
            }
        }
        if target.iter().any(|&t| t > 1) {
            return Err(Error::invalid("targets must be 0 or 1"));
        }
        Ok(Self {
            n_samples: n,
            columns,
            target: BitColumn::from_bits(target.iter().copied()),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, f: usize) -> &BitColumn {
        &self.columns[f]
    }

    pub fn target(&self) -> &BitColumn {
        &self.target
    }

    pub fn n_positive(&self) -> u64 {
        self.target.count()
    }

    pub fn value(&self, sample: usize, feature: usize) -> u8 {
        self.columns[feature].get(sample)
    }

    pub fn target_of(&self, sample: usize) -> u8 {
        self.target.get(sample)
    }

    pub fn row(&self, sample: usize) -> Vec<u8> {
        self.columns.iter().map(|c| c.get(sample)).collect()
    }

    /// `counts[x][t]` for feature `f`.
    pub fn joint_counts(&self, f: usize) -> [[u64; 2]; 2] {
        let n = self.n_samples as u64;
        let x = self.columns[f].count();
        let t = self.n_positive();
        let xt = self.columns[f].and_count(&self.target);
        [[n + xt - x - t, t - xt], [x - xt, xt]]
    }

    /// `counts[x][v][t]` for features `f` (x) and `g` (v).
    pub fn triple_counts(&self, f: usize, g: usize) -> [[[u64; 2]; 2]; 2] {
        let (x, v, t) = (&self.columns[f], &self.columns[g], &self.target);
        let n = self.n_samples as i64;
        let (cx, cv, ct) = (x.count() as i64, v.count() as i64, t.count() as i64);
        let (cxv, cxt, cvt) = (x.and_count(v) as i64, x.and_count(t) as i64, v.and_count(t) as i64);
        let cxvt = x.and3_count(v, t) as i64;
        let mut c = [[[0u64; 2]; 2]; 2];
        c[1][1][1] = cxvt as u64;
        c[1][1][0] = (cxv - cxvt) as u64;
        c[1][0][1] = (cxt - cxvt) as u64;
        c[0][1][1] = (cvt - cxvt) as u64;
        c[1][0][0] = (cx - cxv - cxt + cxvt) as u64;
        c[0][1][0] = (cv - cxv - cvt + cxvt) as u64;
        c[0][0][1] = (ct - cxt - cvt + cxvt) as u64;
        c[0][0][0] = (n - cx - cv - ct + cxv + cxt + cvt - cxvt) as u64;
        c
    }
}

/// Stacks flattened label matrices into a one-vs-rest dataset for
/// `target_class`.
pub fn build_feature_dataset(labels: &[(&FeatureLabelMatrix, &str)], target_class: &str) -> Result<FeatureDataset> {
    if labels.is_empty() {
        return Err(Error::invalid("feature dataset needs at least one sample"));
    }
    let rows: Vec<&[u8]> = labels.iter().map(|(m, _)| m.as_flat()).collect();
    let target: Vec<u8> = labels.iter().map(|(_, c)| u8::from(*c == target_class)).collect();
    let pos = target.iter().filter(|&&t| t == 1).count();
    if pos == 0 || pos == target.len() {
        return Err(Error::invalid(format!(
            "dataset for class {target_class} needs both positive and negative samples"
        )));
    }
    FeatureDataset::from_rows(&rows, &target)
}
