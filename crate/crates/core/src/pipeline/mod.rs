//! End-to-end runs: configuration, in-memory stages, and file outputs.

mod config;
mod io;
mod run;

pub use config::{
    BaselineConfig, DetectorSection, EvaluationConfig, LibraryConfig, MixingConfig, NhmcConfig, RunConfig, Variant,
    TOOL_VERSION,
};
pub use io::*;
pub use run::*;
