//! Library augmentation and the per-class detector bank.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::build_feature_dataset;
use super::naive_bayes::{train_naive_bayes, DetectorModel};
use super::selection::{eliminate_negative_features, select_features_cmi, CmiMode};
use crate::error::{Error, Result};
use crate::nhmc::{FeatureLabelMatrix, LabelMode, Labeler, NhmcModel};
use crate::spectral::{SpectralLibrary, Spectrum};
use crate::wavelet::uwt_values;

/// `0.1, 0.2, …, 1.0`.
pub fn default_attenuation_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Adds attenuated copies of every sample, one per factor, sample-major.
/// Copies keep the class label; their ids get an `_x{factor}` suffix unless
/// the factor is exactly 1.
pub fn augment_library(lib: &SpectralLibrary, grid: &[f64]) -> Result<SpectralLibrary> {
    if grid.is_empty() {
        return Err(Error::invalid("attenuation grid is empty"));
    }
    if let Some(a) = grid.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::invalid(format!("attenuation factor {a} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(lib.len() * grid.len());
    for s in lib.samples() {
        for &a in grid {
            let mut copy = s.scaled(a);
            if a != 1.0 {
                copy.id = format!("{}_x{a:.2}", s.id);
            }
            out.push(copy);
        }
    }
    SpectralLibrary::new(out)
}

/// Knobs for training a [`DetectorBank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub attenuation: Vec<f64>,
    /// Train on attenuated copies as well as the originals.
    pub augment: bool,
    /// Drop negatively correlated features before selection.
    pub eliminate: bool,
    /// Run greedy CMI selection; otherwise every candidate is used.
    pub select: bool,
    pub k_max: usize,
    pub cmi_mode: CmiMode,
    /// Pseudo-count for elimination and selection count tables.
    pub selection_alpha: f64,
    /// Pseudo-count for the naive Bayes estimates.
    pub nb_alpha: f64,
    pub label_mode: LabelMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            attenuation: default_attenuation_grid(),
            augment: true,
            eliminate: true,
            select: true,
            k_max: 50,
            cmi_mode: CmiMode::PairwiseMin,
            selection_alpha: 0.0,
            nb_alpha: 0.5,
            label_mode: LabelMode::Merged,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.select && self.k_max == 0 {
            return Err(Error::invalid("k_max must be at least 1"));
        }
        if !(self.selection_alpha >= 0.0) || !(self.nb_alpha > 0.0) {
            return Err(Error::invalid("smoothing counts must be nonnegative (naive Bayes: positive)"));
        }
        if self.augment {
            augment_grid_check(&self.attenuation)?;
        }
        Ok(())
    }
}

fn augment_grid_check(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::invalid("attenuation factors must lie in (0, 1]"));
    }
    Ok(())
}

/// Per-class decisions for one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub decisions: Vec<bool>,
    pub margins: Vec<f64>,
}

impl Detection {
    /// True when no detector fired.
    pub fn unknown(&self) -> bool {
        !self.decisions.iter().any(|&d| d)
    }
}

/// Trained detectors for every library class together with the chain model
/// that produces their input labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBank {
    pub nhmc: NhmcModel,
    pub config: DetectorConfig,
    pub detectors: Vec<DetectorModel>,
    /// Retained candidate count per class after elimination.
    pub retained: Vec<usize>,
}

/// Labels every reflectance vector with the model.
pub fn label_spectra(model: &NhmcModel, mode: LabelMode, spectra: &[&[f64]]) -> Result<Vec<FeatureLabelMatrix>> {
    let labeler = Labeler::new(model, mode);
    spectra
        .par_iter()
        .map(|s| {
            let w = uwt_values(s, model.n_scales, model.mother)?;
            labeler.label(&w)
        })
        .collect()
}

impl DetectorBank {
    /// Augments (optionally) `train`, labels it with `nhmc`, then trains one
    /// detector per class in parallel.
    pub fn train(train: &SpectralLibrary, nhmc: NhmcModel, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        if train.n_classes() < 2 {
            return Err(Error::invalid("detector training needs at least two classes"));
        }
        let lib = if config.augment {
            augment_library(train, &config.attenuation)?
        } else {
            train.clone()
        };
        let refl: Vec<&[f64]> = lib.samples().iter().map(|s| s.reflectance.as_slice()).collect();
        let labels = label_spectra(&nhmc, config.label_mode, &refl)?;
        let tagged: Vec<(&FeatureLabelMatrix, &str)> = labels.iter().enumerate().map(|(i, m)| (m, lib.label(i))).collect();
        let trained: Vec<(DetectorModel, usize)> = lib
            .classes()
            .par_iter()
            .map(|class| {
                let ds = build_feature_dataset(&tagged, class)?;
                let candidates: Vec<usize> = if config.eliminate {
                    eliminate_negative_features(&ds, config.selection_alpha)
                } else {
                    (0..ds.n_features()).collect()
                };
                let retained = candidates.len();
                let selected = if config.select && !candidates.is_empty() {
                    select_features_cmi(&ds, &candidates, config.k_max, config.cmi_mode, config.selection_alpha)?
                } else {
                    candidates
                };
                Ok((train_naive_bayes(&ds, &selected, class, config.nb_alpha)?, retained))
            })
            .collect::<Result<_>>()?;
        let (detectors, retained) = trained.into_iter().unzip();
        Ok(Self {
            nhmc,
            config,
            detectors,
            retained,
        })
    }

    pub fn classes(&self) -> Vec<&str> {
        self.detectors.iter().map(|d| d.class_id.as_str()).collect()
    }

    fn check_labels(&self, labels: &FeatureLabelMatrix) -> Result<()> {
        if labels.n_scales() != self.nhmc.n_scales {
            return Err(Error::dim("label scales", self.nhmc.n_scales, labels.n_scales()));
        }
        if labels.n_offsets() != self.nhmc.n_offsets() {
            return Err(Error::dim("label offsets", self.nhmc.n_offsets(), labels.n_offsets()));
        }
        Ok(())
    }

    /// Decisions using each detector's first `k` features (all if `None`).
    pub fn detect_k(&self, labels: &FeatureLabelMatrix, k: Option<usize>) -> Result<Detection> {
        self.check_labels(labels)?;
        let flat = labels.as_flat();
        let margins: Vec<f64> = self
            .detectors
            .iter()
            .map(|d| match k {
                Some(k) if k < d.k() => d.truncated(k).margin(flat),
                _ => d.margin(flat),
            })
            .collect();
        Ok(Detection {
            decisions: margins.iter().map(|&m| m > 0.0).collect(),
            margins,
        })
    }

    /// Margins of every prefix size `0..=K` per class: `out[c][k]`.
    pub fn margin_curves(&self, labels: &FeatureLabelMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_labels(labels)?;
        Ok(self.detectors.iter().map(|d| d.margin_curve(labels.as_flat())).collect())
    }

    pub fn label(&self, spectrum: &Spectrum) -> Result<FeatureLabelMatrix> {
        if spectrum.len() != self.nhmc.n_offsets() {
            return Err(Error::dim("spectrum bands", self.nhmc.n_offsets(), spectrum.len()));
        }
        let w = uwt_values(&spectrum.reflectance, self.nhmc.n_scales, self.nhmc.mother)?;
        Labeler::new(&self.nhmc, self.config.label_mode).label(&w)
    }
}

/// Full-model decisions for one label matrix.
pub fn detect(bank: &DetectorBank, labels: &FeatureLabelMatrix) -> Result<Detection> {
    bank.detect_k(labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SyntheticLibraryConfig;

    #[test]
    fn augmentation_counts_and_scaling() {
        let lib = SyntheticLibraryConfig::new(2, 3, 64).generate(1).unwrap();
        assert_eq!(augment_library(&lib, &[1.0]).unwrap(), lib);
        let aug = augment_library(&lib, &default_attenuation_grid()).unwrap();
        assert_eq!(aug.len(), 60);
        let half = augment_library(&lib, &[0.5]).unwrap();
        for (a, b) in half.samples().iter().zip(lib.samples()) {
            assert!(a.reflectance.iter().zip(&b.reflectance).all(|(x, y)| *x == y * 0.5));
            assert_eq!(a.class_label, b.class_label);
        }
        assert!(augment_library(&lib, &[0.0]).is_err());
        assert!(augment_library(&lib, &[1.1]).is_err());
    }

    #[test]
    fn unknown_when_all_negative() {
        let d = Detection {
            decisions: vec![false, false],
            margins: vec![-1.0, 0.0],
        };
        assert!(d.unknown());
    }
}
