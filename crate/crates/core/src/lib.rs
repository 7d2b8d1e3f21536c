//! Semi-supervised endmember detection on semantic spectral features.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod mixing;
pub mod nhmc;
pub mod pipeline;
pub mod rng;
pub mod sparse;
pub mod spectral;
pub mod wavelet;

pub use error::{Error, Result};
