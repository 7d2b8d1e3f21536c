//! Undecimated wavelet transform.
//!
//! Scale index `s` (1-based) corresponds to dilation `d = 2^(s-1)`. The Haar
//! wavelet at dilation `d` centred on offset `l` is `+1/√d` on bands
//! `l-d .. l-1` (shorter wavelengths) and `-1/√d` on bands `l .. l+d-1`.
//! Signals are extended by half-sample mirror reflection, so any dilation up
//! to `2L` is well defined.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MotherWavelet {
    #[default]
    Haar,
}

impl fmt::Display for MotherWavelet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MotherWavelet::Haar => f.write_str("haar"),
        }
    }
}

impl FromStr for MotherWavelet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(MotherWavelet::Haar),
            other => Err(Error::invalid(format!("unknown mother wavelet `{other}`"))),
        }
    }
}

/// `n_s × L` grid of wavelet coefficients, row-major by scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletMatrix {
    n_scales: usize,
    n_offsets: usize,
    mother: MotherWavelet,
    coeffs: Vec<f64>,
}

impl WaveletMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, mother: MotherWavelet) -> Result<Self> {
        let n_scales = rows.len();
        let n_offsets = rows.first().map_or(0, Vec::len);
        if n_scales == 0 || n_offsets == 0 {
            return Err(Error::invalid("wavelet matrix must be non-empty"));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n_offsets) {
            return Err(Error::dim("wavelet row length", n_offsets, r.len()));
        }
        let coeffs: Vec<f64> = rows.into_iter().flatten().collect();
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("wavelet coefficients must be finite"));
        }
        Ok(Self {
            n_scales,
            n_offsets,
            mother,
            coeffs,
        })
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    pub fn n_offsets(&self) -> usize {
        self.n_offsets
    }

    pub fn mother(&self) -> MotherWavelet {
        self.mother
    }

    /// Coefficient at 0-based scale row `s` and offset `l`.
    pub fn get(&self, s: usize, l: usize) -> f64 {
        self.coeffs[s * self.n_offsets + l]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.coeffs[s * self.n_offsets..(s + 1) * self.n_offsets]
    }

    /// The chain of coefficients across scales at offset `l`, finest first.
    pub fn column(&self, l: usize) -> Vec<f64> {
        (0..self.n_scales).map(|s| self.get(s, l)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Largest scale count supported for `n_bands` bands.
pub fn max_scales(n_bands: usize) -> usize {
    let mut n = 1;
    while (1usize << n) <= 2 * n_bands {
        n += 1;
    }
    n
}

fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Transforms a reflectance vector.
pub fn uwt_values(y: &[f64], n_scales: usize, mother: MotherWavelet) -> Result<WaveletMatrix> {
    let n = y.len();
    if n_scales == 0 {
        return Err(Error::invalid("n_scales must be at least 1"));
    }
    if n < 2 {
        return Err(Error::invalid("signal needs at least 2 samples"));
    }
    if n_scales > max_scales(n) {
        return Err(Error::invalid(format!(
            "{n_scales} scales need dilation {} which exceeds twice the signal length {n}",
            1usize << (n_scales - 1)
        )));
    }
    match mother {
        MotherWavelet::Haar => Ok(haar(y, n_scales)),
    }
}

fn haar(y: &[f64], n_scales: usize) -> WaveletMatrix {
    let n = y.len();
    let pad = 1usize << (n_scales - 1);
    // The wavelet is zero-mean, so removing the mean changes nothing except
    // keeping the prefix sums small.
    let mean = y.iter().sum::<f64>() / n as f64;
    let ext_len = n + 2 * pad;
    let mut prefix = Vec::with_capacity(ext_len + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for k in 0..ext_len {
        acc += y[mirror(k as isize - pad as isize, n)] - mean;
        prefix.push(acc);
    }
    // sum of extended samples with signal index in [a, b)
    let window = |a: isize, b: isize| prefix[(b + pad as isize) as usize] - prefix[(a + pad as isize) as usize];
    let mut coeffs = Vec::with_capacity(n_scales * n);
    for s in 0..n_scales {
        let d = 1isize << s;
        let norm = 1.0 / (d as f64).sqrt();
        for l in 0..n as isize {
            coeffs.push(norm * (window(l - d, l) - window(l, l + d)));
        }
    }
    WaveletMatrix {
        n_scales,
        n_offsets: n,
        mother: MotherWavelet::Haar,
        coeffs,
    }
}

/// Undecimated wavelet transform of a spectrum's reflectance.
pub fn uwt(spectrum: &Spectrum, n_scales: usize, mother: MotherWavelet) -> Result<WaveletMatrix> {
    uwt_values(&spectrum.reflectance, n_scales, mother)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution with explicit mirror extension.
    fn oracle(y: &[f64], s: usize, l: usize) -> f64 {
        let d = 1isize << s;
        let l = l as isize;
        let at = |i: isize| y[mirror(i, y.len())];
        let plus: f64 = (l - d..l).map(at).sum();
        let minus: f64 = (l..l + d).map(at).sum();
        (plus - minus) / (d as f64).sqrt()
    }

    #[test]
    fn constant_signal_vanishes() {
        let w = uwt_values(&[0.37; 100], 7, MotherWavelet::Haar).unwrap();
        assert!(w.as_slice().iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn matches_direct_convolution() {
        let y: Vec<f64> = (0..40).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let w = uwt_values(&y, 6, MotherWavelet::Haar).unwrap();
        for s in 0..6 {
            for l in 0..40 {
                assert!((w.get(s, l) - oracle(&y, s, l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_step_peaks_at_edge() {
        let j = 20;
        let y: Vec<f64> = (0..50).map(|i| if i >= j { 1.0 } else { 0.0 }).collect();
        let w = uwt_values(&y, 1, MotherWavelet::Haar).unwrap();
        let row = w.row(0);
        let peak = (0..50).max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs())).unwrap();
        assert_eq!(peak, j);
        assert!((row[j] + 1.0).abs() < 1e-15);
        assert!(row.iter().enumerate().filter(|(l, _)| *l != j).all(|(_, c)| c.abs() < 1e-15));
    }

    #[test]
    fn scale_limit() {
        assert_eq!(max_scales(256), 10);
        assert!(uwt_values(&[0.0; 256], 10, MotherWavelet::Haar).is_ok());
        assert!(uwt_values(&[0.0; 256], 11, MotherWavelet::Haar).is_err());
        assert!(uwt_values(&[0.0; 256], 0, MotherWavelet::Haar).is_err());
    }

    #[test]
    fn shift_covariance_on_interior() {
        let y: Vec<f64> = (0..80).map(|i| (i as f64 * 0.3).sin()).collect();
        let shifted: Vec<f64> = std::iter::once(y[0]).chain(y[..79].iter().copied()).collect();
        let a = uwt_values(&y, 3, MotherWavelet::Haar).unwrap();
        let b = uwt_values(&shifted, 3, MotherWavelet::Haar).unwrap();
        for s in 0..3 {
            for l in 10..70 {
                assert!((a.get(s, l) - b.get(s, l + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parse_mother() {
        assert_eq!("Haar".parse::<MotherWavelet>().unwrap(), MotherWavelet::Haar);
        assert!("db4".parse::<MotherWavelet>().is_err());
    }
}
