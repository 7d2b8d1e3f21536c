//! Run configuration, loaded from TOML with every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{default_attenuation_grid, CmiMode, DetectorConfig};
use crate::error::{Error, Result};
use crate::mixing::MixingModel;
use crate::nhmc::{EmConfig, LabelMode};
use crate::sparse::AdmmConfig;
use crate::spectral::{Geometry, SyntheticLibraryConfig};
use crate::wavelet::{max_scales, MotherWavelet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    /// Library CSV; when absent a synthetic library is generated.
    pub path: Option<PathBuf>,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_bands: usize,
    /// Top up every training class to the largest class size with
    /// within-class Hapke mixtures.
    pub equalize: bool,
    pub incidence_deg: f64,
    pub emission_deg: f64,
    /// Within-class variability of the synthetic generator.
    pub depth_jitter: f64,
    pub slope_jitter: f64,
    pub level_jitter: f64,
    pub center_jitter_nm: f64,
    pub grain_jitter: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        let synth = SyntheticLibraryConfig::new(8, 20, 256);
        Self {
            path: None,
            n_classes: synth.n_classes,
            samples_per_class: synth.samples_per_class,
            n_bands: synth.n_bands,
            equalize: true,
            incidence_deg: Geometry::LAB_DEFAULT.incidence_deg,
            emission_deg: Geometry::LAB_DEFAULT.emission_deg,
            depth_jitter: synth.depth_jitter,
            slope_jitter: synth.slope_jitter,
            level_jitter: synth.level_jitter,
            center_jitter_nm: synth.center_jitter_nm,
            grain_jitter: synth.grain_jitter,
        }
    }
}

impl LibraryConfig {
    pub fn synthetic(&self) -> SyntheticLibraryConfig {
        SyntheticLibraryConfig {
            depth_jitter: self.depth_jitter,
            slope_jitter: self.slope_jitter,
            level_jitter: self.level_jitter,
            center_jitter_nm: self.center_jitter_nm,
            grain_jitter: self.grain_jitter,
            ..SyntheticLibraryConfig::new(self.n_classes, self.samples_per_class, self.n_bands)
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.incidence_deg, self.emission_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    pub models: Vec<MixingModel>,
    pub n_endmembers: usize,
    pub n_combos: usize,
    pub n_weights: usize,
    pub snr_db: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            models: MixingModel::ALL.to_vec(),
            n_endmembers: 3,
            n_combos: 10,
            n_weights: 50,
            snr_db: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NhmcConfig {
    pub k_grid: Vec<usize>,
    pub n_scales: usize,
    pub mother: MotherWavelet,
    pub em: EmConfig,
}

impl Default for NhmcConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![2, 4, 6, 8],
            n_scales: 10,
            mother: MotherWavelet::Haar,
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub attenuation: Vec<f64>,
    /// Feature counts evaluated; the largest one bounds selection.
    pub k_features: Vec<usize>,
    pub cmi_mode: CmiMode,
    pub selection_alpha: f64,
    pub nb_alpha: f64,
    pub label_mode: LabelMode,
    /// Also train the ablation variants (plain NB, NCFE+NB, LA+NB).
    pub ablations: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            attenuation: default_attenuation_grid(),
            k_features: (1..=50).collect(),
            cmi_mode: CmiMode::PairwiseMin,
            selection_alpha: 0.0,
            nb_alpha: 0.5,
            label_mode: LabelMode::Merged,
            ablations: true,
        }
    }
}

impl DetectorSection {
    pub fn k_max(&self) -> usize {
        self.k_features.iter().copied().max().unwrap_or(0)
    }
}

/// A detector training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub augment: bool,
    pub eliminate: bool,
    pub select: bool,
}

impl Variant {
    /// The full method: augmentation, elimination, CMI selection.
    pub const FULL: Variant = Variant {
        name: "NCFE+LA+NB",
        augment: true,
        eliminate: true,
        select: true,
    };
    pub const ABLATIONS: [Variant; 3] = [
        Variant {
            name: "NB",
            augment: false,
            eliminate: false,
            select: false,
        },
        Variant {
            name: "NCFE+NB",
            augment: false,
            eliminate: true,
            select: true,
        },
        Variant {
            name: "LA+NB",
            augment: true,
            eliminate: false,
            select: true,
        },
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub enabled: bool,
    pub sunsal_lambdas: Vec<f64>,
    pub clsunsal_lambdas: Vec<f64>,
    pub n_thresholds: usize,
    pub admm: AdmmConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sunsal_lambdas: vec![0.0, 1e-4, 1e-2, 1e-1],
            clsunsal_lambdas: vec![1e-4, 5e-4, 1e-2, 1e-1],
            n_thresholds: 70,
            admm: AdmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub ns_edges: Vec<f64>,
    /// Leave pixels with no detection out of the false-alarm counts.
    pub exclude_unknown: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ns_edges: (0..=10).map(f64::from).collect(),
            exclude_unknown: false,
        }
    }
}

/// Everything a run depends on. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub library: LibraryConfig,
    pub mixing: MixingConfig,
    pub nhmc: NhmcConfig,
    pub detector: DetectorSection,
    pub baseline: BaselineConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            library: LibraryConfig::default(),
            mixing: MixingConfig::default(),
            nhmc: NhmcConfig::default(),
            detector: DetectorSection::default(),
            baseline: BaselineConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("{what} must not be empty")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form. The
    /// output directory does not take part.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `config_hash=… version=…`
    pub fn provenance(&self) -> String {
        format!("config_hash={} version={}", self.hash(), TOOL_VERSION)
    }

    /// `# config_hash=… version=…`
    pub fn header(&self) -> String {
        format!("# {}", self.provenance())
    }

    pub fn validate(&self) -> Result<()> {
        nonempty(&self.mixing.models, "mixing.models")?;
        nonempty(&self.nhmc.k_grid, "nhmc.k_grid")?;
        nonempty(&self.detector.attenuation, "detector.attenuation")?;
        nonempty(&self.detector.k_features, "detector.k_features")?;
        nonempty(&self.evaluation.ns_edges, "evaluation.ns_edges")?;
        if self.baseline.enabled {
            nonempty(&self.baseline.sunsal_lambdas, "baseline.sunsal_lambdas")?;
            nonempty(&self.baseline.clsunsal_lambdas, "baseline.clsunsal_lambdas")?;
            if self.baseline.n_thresholds == 0 {
                return Err(Error::Config("baseline.n_thresholds must be positive".into()));
            }
            self.baseline.admm.validate()?;
            for &l in self.baseline.sunsal_lambdas.iter().chain(&self.baseline.clsunsal_lambdas) {
                self.baseline.admm.with_lambda(l).validate()?;
            }
        }
        if self.nhmc.k_grid.iter().any(|&k| k < 2) {
            return Err(Error::Config("nhmc.k_grid entries must be at least 2".into()));
        }
        if self.detector.k_features.iter().any(|&k| k == 0) {
            return Err(Error::Config("detector.k_features entries must be positive".into()));
        }
        if self.nhmc.n_scales == 0 {
            return Err(Error::Config("nhmc.n_scales must be positive".into()));
        }
        if self.library.path.is_none() {
            self.library
                .synthetic()
                .validate()
                .map_err(|e| Error::Config(format!("library: {e}")))?;
        }
        if self.library.path.is_none() && self.nhmc.n_scales > max_scales(self.library.n_bands) {
            return Err(Error::Config(format!(
                "nhmc.n_scales = {} is too large for {} bands",
                self.nhmc.n_scales, self.library.n_bands
            )));
        }
        if self.evaluation.ns_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("evaluation.ns_edges must be strictly increasing".into()));
        }
        if !(self.mixing.snr_db.is_finite()) {
            return Err(Error::Config("mixing.snr_db must be finite".into()));
        }
        self.detector_config(Variant::FULL).validate()
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v = vec![Variant::FULL];
        if self.detector.ablations {
            v.extend(Variant::ABLATIONS);
        }
        v
    }

    pub fn detector_config(&self, v: Variant) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            attenuation: d.attenuation.clone(),
            augment: v.augment,
            eliminate: v.eliminate,
            select: v.select,
            k_max: d.k_max(),
            cmi_mode: d.cmi_mode,
            selection_alpha: d.selection_alpha,
            nb_alpha: d.nb_alpha,
            label_mode: d.label_mode,
        }
    }

    /// Seed of the additive noise, distinct from the mixture seed.
    pub fn noise_seed(&self) -> u64 {
        self.seed.wrapping_add(0x5eed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.nhmc.k_grid, vec![2, 4, 6, 8]);
        assert_eq!(cfg.detector.k_max(), 50);
        assert_eq!(cfg.baseline.n_thresholds, 70);
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.nhmc.k_grid = vec![2, 4];
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn partial_sections_override() {
        let cfg = RunConfig::from_toml("seed = 3\n[mixing]\nmodels = [\"LMM\", \"SM\"]\n[nhmc.em]\nmax_iters = 5\n").unwrap();
        assert_eq!(cfg.mixing.models, vec![MixingModel::Lmm, MixingModel::Sm]);
        assert_eq!(cfg.nhmc.em.max_iters, 5);
        assert_eq!(cfg.nhmc.em.tol, 1e-6);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RunConfig::from_toml("[nhmc]\nk_grid = []\n").is_err());
        assert!(RunConfig::from_toml("[baseline]\nsunsal_lambdas = [-1.0]\n").is_err());
        assert!(RunConfig::from_toml("[nhmc]\nn_scales = 12\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[detector]\nattenuation = [0.0]\n").is_err());
    }
}
