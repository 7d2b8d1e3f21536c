//! Linear sparse-unmixing baselines with hard-threshold detection.

mod admm;
mod nnls;

pub use admm::{sunsal_objective, AdmmConfig, AdmmSolver, UnmixResult};
pub use nnls::{kkt_violation, nnls};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::{SpectralLibrary, Spectrum};

/// `L × N` matrix whose columns are the library spectra, in sample order.
pub fn library_matrix(lib: &SpectralLibrary) -> DMatrix<f64> {
    let cols: Vec<&Spectrum> = lib.samples().iter().collect();
    DMatrix::from_fn(lib.n_bands(), cols.len(), |i, j| cols[j].reflectance[i])
}

/// Stacks spectra as columns.
pub fn batch_matrix(spectra: &[&[f64]]) -> Result<DMatrix<f64>> {
    let n = spectra.first().map_or(0, |s| s.len());
    if let Some(s) = spectra.iter().find(|s| s.len() != n) {
        return Err(Error::dim("batch spectrum length", n, s.len()));
    }
    Ok(DMatrix::from_fn(n, spectra.len(), |i, j| spectra[j][i]))
}

/// Largest abundance per class; `sample_class[i]` is the class index of
/// library sample `i`.
pub fn class_max_abundance(a: &[f64], sample_class: &[usize], n_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n_classes];
    for (&v, &c) in a.iter().zip(sample_class) {
        out[c] = out[c].max(v);
    }
    out
}

/// Classes with at least one library sample whose abundance exceeds `tau`.
pub fn threshold_detect(a: &[f64], tau: f64, sample_class: &[usize], n_classes: usize) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    if a.len() != sample_class.len() {
        return Err(Error::dim("abundance vector", sample_class.len(), a.len()));
    }
    Ok(class_max_abundance(a, sample_class, n_classes)
        .into_iter()
        .map(|m| m > tau)
        .collect())
}

/// `n` thresholds evenly spaced strictly inside (0, 1).
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let classes = [0, 1, 2];
        assert_eq!(threshold_detect(&[0.3, 0.15, 0.0], 0.2, &classes, 3).unwrap(), vec![true, false, false]);
        assert_eq!(threshold_detect(&[0.3, 0.15, 0.0], 0.0, &classes, 3).unwrap(), vec![true, true, false]);
        assert_eq!(threshold_detect(&[0.3, 0.15, 0.9], 1.0, &classes, 3).unwrap(), vec![false; 3]);
        assert!(threshold_detect(&[0.3], 1.5, &[0], 1).is_err());
    }

    #[test]
    fn class_mapping_uses_any_sample() {
        let d = threshold_detect(&[0.0, 0.4, 0.1, 0.0], 0.2, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(d, vec![true, false]);
    }

    #[test]
    fn grid_is_interior() {
        let g = threshold_grid(70);
        assert_eq!(g.len(), 70);
        assert!(g[0] > 0.0 && g[69] < 1.0);
    }
}
