//! In-memory pipeline stages: libraries, mixtures, training, detection runs
//! and their evaluation.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use crate::detector::{label_spectra, DetectorBank};
use crate::error::{Error, Result};
use crate::evaluation::{
    d_roc, nonlinearity_score, recall_far, roc_mesh, ConfusionCounts, NsRecord, RocMesh, RocPoint,
};
use crate::mixing::{generate_mixture_set, MixedPixel, MixingModel, MixtureSetParams, NoiseSpec};
use crate::nhmc::{train_nhmc, FeatureLabelMatrix, NhmcModel};
use crate::sparse::{batch_matrix, class_max_abundance, library_matrix, threshold_grid, AdmmSolver, UnmixResult};
use crate::spectral::{equalize_classes_hapke, load_library, split_train_test_kmeans, SpectralLibrary};
use crate::wavelet::uwt_values;

/// Name of the full method in the baseline comparison.
pub const NHMC_ED: &str = "NHMC-ED";
pub const SUNSAL: &str = "SUnSAL";
pub const CLSUNSAL: &str = "CLSUnSAL";

#[derive(Debug, Clone, PartialEq)]
pub struct Libraries {
    pub full: SpectralLibrary,
    /// Training split, equalised when configured.
    pub train: SpectralLibrary,
    pub test: SpectralLibrary,
}

/// Loads or generates the library, splits each class by 2-means, and
/// equalises the training classes.
pub fn prepare_libraries(cfg: &RunConfig) -> Result<Libraries> {
    let full = match &cfg.library.path {
        Some(p) => load_library(p)?,
        None => cfg.library.synthetic().generate(cfg.seed)?,
    };
    let (train, test) = split_train_test_kmeans(&full, cfg.seed)?;
    let train = if cfg.library.equalize {
        let target = train.classes().iter().map(|c| train.class_members(c).len()).max().unwrap_or(0);
        equalize_classes_hapke(&train, target, cfg.library.geometry(), cfg.seed)?
    } else {
        train
    };
    Ok(Libraries { full, train, test })
}

/// A test pixel as far as detection and scoring are concerned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPixel {
    pub id: String,
    pub reflectance: Vec<f64>,
    pub true_classes: Vec<String>,
}

impl From<&MixedPixel> for TestPixel {
    fn from(p: &MixedPixel) -> Self {
        Self {
            id: p.id.clone(),
            reflectance: p.spectrum.reflectance.clone(),
            true_classes: p.true_classes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDataset {
    pub model: MixingModel,
    pub pixels: Vec<MixedPixel>,
}

impl MixtureDataset {
    pub fn test_pixels(&self) -> Vec<TestPixel> {
        self.pixels.iter().map(TestPixel::from).collect()
    }
}

pub fn mixture_params(cfg: &RunConfig, model: MixingModel) -> MixtureSetParams {
    MixtureSetParams {
        model,
        n_endmembers: cfg.mixing.n_endmembers,
        n_combos: cfg.mixing.n_combos,
        n_weights: cfg.mixing.n_weights,
        noise: NoiseSpec {
            snr_db: cfg.mixing.snr_db,
            seed: cfg.noise_seed(),
        },
        geometry: cfg.library.geometry(),
    }
}

/// One mixture set per configured model, drawn from the test split.
pub fn simulate_mixtures(cfg: &RunConfig, test: &SpectralLibrary) -> Result<Vec<MixtureDataset>> {
    cfg.mixing
        .models
        .iter()
        .map(|&model| {
            Ok(MixtureDataset {
                model,
                pixels: generate_mixture_set(test, &mixture_params(cfg, model), cfg.seed)?,
            })
        })
        .collect()
}

/// Nonlinearity score of every pixel against all training samples of its
/// true classes.
pub fn ns_records(train: &SpectralLibrary, pixels: &[TestPixel]) -> Result<Vec<NsRecord>> {
    pixels
        .par_iter()
        .map(|p| {
            let mut cols: Vec<&[f64]> = Vec::new();
            for c in &p.true_classes {
                let members = train.class_members(c);
                if members.is_empty() {
                    return Err(Error::invalid(format!("class {c} of pixel {} is not in the training library", p.id)));
                }
                cols.extend(members.iter().map(|&i| train.samples()[i].reflectance.as_slice()));
            }
            let w = batch_matrix(&cols)?;
            let ns = nonlinearity_score(&p.reflectance, &w)?;
            Ok(NsRecord {
                pixel_id: p.id.clone(),
                ns_deg: ns.degrees,
                degenerate: ns.degenerate,
                endmembers: p.true_classes.join(";"),
            })
        })
        .collect()
}

/// NHMC model and detector banks for one `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub k: usize,
    /// `(variant name, bank)`; the full method comes first.
    pub banks: Vec<(String, DetectorBank)>,
}

impl TrainedModel {
    pub fn nhmc(&self) -> &NhmcModel {
        &self.banks[0].1.nhmc
    }

    pub fn bank(&self, variant: &str) -> Option<&DetectorBank> {
        self.banks.iter().find(|(n, _)| n == variant).map(|(_, b)| b)
    }
}

pub fn train_nhmc_for_library(cfg: &RunConfig, train: &SpectralLibrary, k: usize) -> Result<NhmcModel> {
    let wavelets = train
        .samples()
        .iter()
        .map(|s| uwt_values(&s.reflectance, cfg.nhmc.n_scales, cfg.nhmc.mother))
        .collect::<Result<Vec<_>>>()?;
    train_nhmc(&wavelets, k, &cfg.nhmc.em)
}

/// Trains the chain model for `k` on the unaugmented library, then every
/// configured detector variant on top of it.
pub fn train_model(cfg: &RunConfig, train: &SpectralLibrary, k: usize) -> Result<TrainedModel> {
    let nhmc = train_nhmc_for_library(cfg, train, k)?;
    let banks = cfg
        .variants()
        .into_iter()
        .map(|v: Variant| Ok((v.name.to_string(), DetectorBank::train(train, nhmc.clone(), cfg.detector_config(v))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedModel { k, banks })
}

pub fn train_models(cfg: &RunConfig, train: &SpectralLibrary) -> Result<Vec<TrainedModel>> {
    cfg.nhmc.k_grid.iter().map(|&k| train_model(cfg, train, k)).collect()
}

/// Class flags of every pixel in `classes` order.
pub fn truth_flags(pixels: &[TestPixel], classes: &[String]) -> Result<Vec<Vec<bool>>> {
    pixels
        .iter()
        .map(|p| {
            if let Some(c) = p.true_classes.iter().find(|c| !classes.contains(c)) {
                return Err(Error::invalid(format!("pixel {} has class {c} unknown to the detectors", p.id)));
            }
            Ok(classes.iter().map(|c| p.true_classes.contains(c)).collect())
        })
        .collect()
}

/// Decisions of one method on one dataset over its parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: String,
    pub model: MixingModel,
    pub n_classes: usize,
    pub params: Vec<Vec<(String, f64)>>,
    /// `decisions[p][pixel * n_classes + class]`.
    pub decisions: Vec<Vec<bool>>,
}

impl MethodRun {
    fn n_pixels(&self) -> usize {
        self.decisions.first().map_or(0, |d| d.len() / self.n_classes.max(1))
    }

    fn push(&mut self, params: Vec<(String, f64)>, decisions: Vec<bool>) {
        self.params.push(params);
        self.decisions.push(decisions);
    }

    /// Confusion for parameter `p`, over `pixels` (all when `None`).
    pub fn confusion(&self, p: usize, truth: &[Vec<bool>], pixels: Option<&[usize]>, exclude_unknown: bool) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        let nc = self.n_classes;
        let d = &self.decisions[p];
        let mut tally = |i: usize| {
            let row = &d[i * nc..(i + 1) * nc];
            let unknown = !row.iter().any(|&x| x);
            for (j, &det) in row.iter().enumerate() {
                if exclude_unknown && unknown && !truth[i][j] {
                    continue;
                }
                c.add(truth[i][j], det);
            }
        };
        match pixels {
            Some(ix) => ix.iter().for_each(|&i| tally(i)),
            None => (0..self.n_pixels()).for_each(&mut tally),
        }
        c
    }

    pub fn per_class_confusion(&self, p: usize, truth: &[Vec<bool>]) -> Vec<ConfusionCounts> {
        let nc = self.n_classes;
        let mut out = vec![ConfusionCounts::default(); nc];
        for (i, t) in truth.iter().enumerate() {
            for j in 0..nc {
                out[j].add(t[j], self.decisions[p][i * nc + j]);
            }
        }
        out
    }

    pub fn mesh(&self, truth: &[Vec<bool>], exclude_unknown: bool) -> Result<RocMesh> {
        roc_mesh((0..self.params.len()).map(|p| (self.params[p].clone(), self.confusion(p, truth, None, exclude_unknown))))
    }
}

/// Per-pixel feature labels under the chain model of `bank`.
pub fn pixel_labels(bank: &DetectorBank, pixels: &[TestPixel]) -> Result<Vec<FeatureLabelMatrix>> {
    if let Some(p) = pixels.iter().find(|p| p.reflectance.len() != bank.nhmc.n_offsets()) {
        return Err(Error::dim(format!("bands of pixel {}", p.id), bank.nhmc.n_offsets(), p.reflectance.len()));
    }
    let refl: Vec<&[f64]> = pixels.iter().map(|p| p.reflectance.as_slice()).collect();
    label_spectra(&bank.nhmc, bank.config.label_mode, &refl)
}

/// Appends the `(k, K)` decisions of one bank to `run`. Banks trained
/// without selection contribute a single `(k)` point.
pub fn extend_nhmc_run(run: &mut MethodRun, k: usize, bank: &DetectorBank, labels: &[FeatureLabelMatrix], k_features: &[usize]) -> Result<()> {
    let curves: Vec<Vec<Vec<f64>>> = labels.iter().map(|l| bank.margin_curves(l)).collect::<Result<_>>()?;
    let decide = |kk: Option<usize>| -> Vec<bool> {
        curves
            .iter()
            .flat_map(|per_class| {
                per_class.iter().map(move |curve| {
                    let idx = kk.map_or(curve.len() - 1, |kk| kk.min(curve.len() - 1));
                    curve[idx] > 0.0
                })
            })
            .collect()
    };
    if bank.config.select {
        for &kk in k_features {
            run.push(vec![("k".into(), k as f64), ("K".into(), kk as f64)], decide(Some(kk)));
        }
    } else {
        run.push(vec![("k".into(), k as f64)], decide(None));
    }
    Ok(())
}

/// Runs one detector variant of every trained model on a dataset.
pub fn nhmc_run(
    models: &[TrainedModel],
    variant: &str,
    method: &str,
    model: MixingModel,
    pixels: &[TestPixel],
    k_features: &[usize],
) -> Result<MethodRun> {
    let first = models
        .first()
        .and_then(|m| m.bank(variant))
        .ok_or_else(|| Error::invalid(format!("no trained detectors for variant {variant}")))?;
    let mut run = MethodRun {
        method: method.to_string(),
        model,
        n_classes: first.detectors.len(),
        params: Vec::new(),
        decisions: Vec::new(),
    };
    for m in models {
        let bank = m
            .bank(variant)
            .ok_or_else(|| Error::invalid(format!("model k={} lacks variant {variant}", m.k)))?;
        let labels = pixel_labels(bank, pixels)?;
        extend_nhmc_run(&mut run, m.k, bank, &labels, k_features)?;
    }
    Ok(run)
}

/// Sparse-unmixing baseline flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Sunsal,
    Clsunsal,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Sunsal => SUNSAL,
            Baseline::Clsunsal => CLSUNSAL,
        }
    }

    pub fn lambdas(self, cfg: &RunConfig) -> &[f64] {
        match self {
            Baseline::Sunsal => &cfg.baseline.sunsal_lambdas,
            Baseline::Clsunsal => &cfg.baseline.clsunsal_lambdas,
        }
    }
}

/// Abundances of every pixel for one λ.
pub fn unmix(solver: &AdmmSolver, cfg: &RunConfig, method: Baseline, lambda: f64, pixels: &[TestPixel]) -> Result<UnmixResult> {
    let cols: Vec<&[f64]> = pixels.iter().map(|p| p.reflectance.as_slice()).collect();
    let y = batch_matrix(&cols)?;
    let admm = cfg.baseline.admm.with_lambda(lambda);
    match method {
        Baseline::Sunsal => solver.sunsal(&y, &admm),
        Baseline::Clsunsal => solver.clsunsal(&y, &admm),
    }
}

/// Class index of each library sample in `classes` order.
pub fn sample_classes(lib: &SpectralLibrary, classes: &[String]) -> Result<Vec<usize>> {
    (0..lib.len())
        .map(|i| {
            classes
                .iter()
                .position(|c| c == lib.label(i))
                .ok_or_else(|| Error::invalid(format!("library class {} has no detector", lib.label(i))))
        })
        .collect()
}

/// Appends the `(λ, τ)` decisions for one abundance matrix.
pub fn extend_baseline_run(run: &mut MethodRun, lambda: f64, abundances: &DMatrix<f64>, sample_class: &[usize], thresholds: &[f64]) {
    let nc = run.n_classes;
    let maxima: Vec<Vec<f64>> = (0..abundances.ncols())
        .map(|j| {
            let a: Vec<f64> = abundances.column(j).iter().copied().collect();
            class_max_abundance(&a, sample_class, nc)
        })
        .collect();
    for &tau in thresholds {
        let d = maxima.iter().flat_map(|m| m.iter().map(move |&v| v > tau)).collect();
        run.push(vec![("lambda".into(), lambda), ("tau".into(), tau)], d);
    }
}

pub fn baseline_run(
    cfg: &RunConfig,
    solver: &AdmmSolver,
    method: Baseline,
    model: MixingModel,
    pixels: &[TestPixel],
    sample_class: &[usize],
    n_classes: usize,
) -> Result<MethodRun> {
    let mut run = MethodRun {
        method: method.name().to_string(),
        model,
        n_classes,
        params: Vec::new(),
        decisions: Vec::new(),
    };
    let thresholds = threshold_grid(cfg.baseline.n_thresholds);
    for &lambda in method.lambdas(cfg) {
        let res = unmix(solver, cfg, method, lambda, pixels)?;
        extend_baseline_run(&mut run, lambda, &res.abundances, sample_class, &thresholds);
    }
    Ok(run)
}

pub fn baseline_solver(cfg: &RunConfig, train: &SpectralLibrary) -> Result<AdmmSolver> {
    AdmmSolver::new(library_matrix(train), cfg.baseline.admm.rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub model: MixingModel,
    pub d_roc: f64,
    pub best: RocPoint,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub method: String,
    pub model: MixingModel,
    pub class: String,
    pub recall: Option<f64>,
    pub far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsBinRow {
    pub method: String,
    pub lo: f64,
    pub hi: f64,
    pub n_pixels: usize,
    pub d_roc: Option<f64>,
}

/// Everything the report files are made of.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub meshes: Vec<(String, MixingModel, RocMesh)>,
    pub summary: Vec<SummaryRow>,
    pub per_class: Vec<PerClassRow>,
    pub ns_bins: Vec<NsBinRow>,
}

impl Evaluation {
    pub fn d_roc(&self, method: &str, model: MixingModel) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.model == model)
            .map(|r| r.d_roc)
    }
}

/// Truth, NS and runs of one dataset.
pub struct DatasetRuns<'a> {
    pub model: MixingModel,
    pub truth: Vec<Vec<bool>>,
    pub ns: &'a [NsRecord],
    pub runs: Vec<MethodRun>,
}

/// Meshes, d_ROC summary, per-class rates at the best operating point and
/// NS-binned d_ROC (pooled over datasets).
pub fn evaluate_runs(datasets: &[DatasetRuns<'_>], classes: &[String], cfg: &RunConfig) -> Result<Evaluation> {
    let excl = cfg.evaluation.exclude_unknown;
    let mut meshes = Vec::new();
    let mut summary = Vec::new();
    let mut per_class = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for ds in datasets {
        let mean_ns = ds.ns.iter().map(|r| r.ns_deg).sum::<f64>() / ds.ns.len().max(1) as f64;
        for run in &ds.runs {
            if !methods.contains(&run.method) {
                methods.push(run.method.clone());
            }
            let mesh = run.mesh(&ds.truth, excl)?;
            let best_idx = (0..mesh.points.len())
                .reduce(|b, p| if mesh.points[p].distance() < mesh.points[b].distance() { p } else { b })
                .ok_or_else(|| Error::invalid("empty parameter grid"))?;
            let best = mesh.points[best_idx].clone();
            for (c, counts) in run.per_class_confusion(best_idx, &ds.truth).iter().enumerate() {
                let (recall, far) = match recall_far(counts) {
                    Ok((r, f)) => (Some(r), Some(f)),
                    Err(_) => (
                        (counts.tp + counts.fn_ > 0).then(|| counts.tp as f64 / (counts.tp + counts.fn_) as f64),
                        (counts.fp + counts.tn > 0).then(|| counts.fp as f64 / (counts.fp + counts.tn) as f64),
                    ),
                };
                per_class.push(PerClassRow {
                    method: run.method.clone(),
                    model: ds.model,
                    class: classes[c].clone(),
                    recall,
                    far,
                });
            }
            summary.push(SummaryRow {
                method: run.method.clone(),
                model: ds.model,
                d_roc: d_roc(&mesh)?,
                best,
                mean_ns,
            });
            meshes.push((run.method.clone(), ds.model, mesh));
        }
    }
    let edges = &cfg.evaluation.ns_edges;
    let bins = crate::evaluation::bin_by_ns(&[], edges)?;
    let mut ns_bins = Vec::new();
    for method in &methods {
        for (b, bin) in bins.iter().enumerate() {
            let mut n_pixels = 0;
            let mut pooled: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
            let mut params: Vec<Vec<(String, f64)>> = Vec::new();
            for ds in datasets {
                let Some(run) = ds.runs.iter().find(|r| &r.method == method) else { continue };
                let members: Vec<usize> = ds
                    .ns
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.ns_deg >= bin.lo && (r.ns_deg < bin.hi || (b + 1 == bins.len() && r.ns_deg <= bin.hi)))
                    .map(|(i, _)| i)
                    .collect();
                n_pixels += members.len();
                params = run.params.clone();
                for p in 0..run.params.len() {
                    pooled.entry(p).or_default().merge(&run.confusion(p, &ds.truth, Some(&members), excl));
                }
            }
            let d = if n_pixels == 0 {
                None
            } else {
                roc_mesh(pooled.into_iter().map(|(p, c)| (params[p].clone(), c)))
                    .ok()
                    .and_then(|m| d_roc(&m).ok())
            };
            ns_bins.push(NsBinRow {
                method: method.clone(),
                lo: bin.lo,
                hi: bin.hi,
                n_pixels,
                d_roc: d,
            });
        }
    }
    Ok(Evaluation {
        meshes,
        summary,
        per_class,
        ns_bins,
    })
}

/// Outcome of a full in-memory benchmark.
pub struct Benchmark {
    pub libraries: Libraries,
    pub datasets: Vec<MixtureDataset>,
    pub models: Vec<TrainedModel>,
    pub ns: Vec<Vec<NsRecord>>,
    pub evaluation: Evaluation,
}

/// Every method on every dataset, without touching the filesystem.
pub fn run_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let libraries = prepare_libraries(cfg)?;
    let datasets = simulate_mixtures(cfg, &libraries.test)?;
    let models = train_models(cfg, &libraries.train)?;
    let classes: Vec<String> = libraries.train.classes().to_vec();
    let solver = if cfg.baseline.enabled {
        Some(baseline_solver(cfg, &libraries.train)?)
    } else {
        None
    };
    let sample_class = sample_classes(&libraries.train, &classes)?;
    let mut ns = Vec::new();
    let mut all_runs = Vec::new();
    for ds in &datasets {
        let pixels = ds.test_pixels();
        ns.push(ns_records(&libraries.train, &pixels)?);
        let truth = truth_flags(&pixels, &classes)?;
        let mut runs = Vec::new();
        for v in cfg.variants() {
            let method = if v == Variant::FULL { NHMC_ED } else { v.name };
            runs.push(nhmc_run(&models, v.name, method, ds.model, &pixels, &cfg.detector.k_features)?);
        }
        if let Some(solver) = &solver {
            for b in [Baseline::Sunsal, Baseline::Clsunsal] {
                runs.push(baseline_run(cfg, solver, b, ds.model, &pixels, &sample_class, classes.len())?);
            }
        }
        all_runs.push((ds.model, truth, runs));
    }
    let dataset_runs: Vec<DatasetRuns<'_>> = all_runs
        .into_iter()
        .zip(&ns)
        .map(|((model, truth, runs), ns)| DatasetRuns { model, truth, ns, runs })
        .collect();
    let evaluation = evaluate_runs(&dataset_runs, &classes, cfg)?;
    Ok(Benchmark {
        libraries,
        datasets,
        models,
        ns,
        evaluation,
    })
}
