//! One-vs-rest endmember detectors over flattened feature labels.
//!
//! Training per class: build a binary dataset, drop features whose joint with
//! the target has a non-positive determinant, greedily pick up to `K` features
//! by conditional mutual information, and fit Bernoulli naive Bayes on them.

mod bank;
mod dataset;
mod naive_bayes;
mod selection;

pub use bank::{
    augment_library, default_attenuation_grid, detect, label_spectra, Detection, DetectorBank, DetectorConfig,
};
pub use dataset::{build_feature_dataset, BitColumn, FeatureDataset};
pub use naive_bayes::{train_naive_bayes, DetectorModel};
pub use selection::{
    conditional_mutual_information, eliminate_negative_features, mutual_information, select_features_cmi, CmiMode,
    ErrorMatrix, SCORE_EPS,
};
