//! File-backed stages. Every CSV begins with the `# config_hash=… version=…`
//! header; JSON files carry the same fields inline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant, TOOL_VERSION};
use super::run::*;
use crate::detector::{DetectorBank, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::evaluation::NsRecord;
use crate::mixing::{MixedPixel, MixingModel, MixtureSpec};
use crate::nhmc::NhmcModel;
use crate::spectral::{load_library, save_library, SpectralLibrary};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

pub const LIBRARY_TRAIN: &str = "library_train.csv";
pub const LIBRARY_TEST: &str = "library_test.csv";

pub fn mixtures_file(model: MixingModel) -> String {
    format!("mixtures_{}.csv", model.name())
}

pub fn specs_file(model: MixingModel) -> String {
    format!("mixtures_{}_specs.json", model.name())
}

pub fn ns_file(model: MixingModel) -> String {
    format!("ns_{}.csv", model.name())
}

pub fn archive_file(k: usize) -> String {
    format!("model_k{k}.json")
}

pub fn selected_features_file(k: usize) -> String {
    format!("selected_features_k{k}.csv")
}

pub fn decisions_file(k: usize, model: MixingModel) -> String {
    format!("decisions_k{k}_{}.csv", model.name())
}

pub fn abundances_file(method: Baseline, lambda_idx: usize, model: MixingModel) -> String {
    format!("abundances_{}_l{lambda_idx}_{}.csv", method.name(), model.name())
}

/// File-name form of a method name: `NCFE+LA+NB` → `NCFE-LA-NB`.
pub fn method_slug(method: &str) -> String {
    method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '-' })
        .collect()
}

pub fn mesh_file(method: &str, model: MixingModel) -> String {
    format!("mesh_{}_{}.csv", method_slug(method), model.name())
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Records of a headered CSV, comment lines skipped, with 1-based line numbers.
fn csv_records(path: &Path) -> Result<(csv::StringRecord, Vec<(u64, csv::StringRecord)>)> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec));
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, line: u64, cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{cell}` is not a number")))
}

fn parse_flag(path: &Path, line: u64, cell: &str) -> Result<bool> {
    match cell.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(parse_err(path, line, format!("`{other}` is not a 0/1 flag"))),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn mixtures_csv(header: &str, wavelengths: &[f64], pixels: &[MixedPixel]) -> String {
    let mut out = format!("{header}\npixel_id,true_classes");
    for wl in wavelengths {
        let _ = write!(out, ",{wl:?}");
    }
    out.push('\n');
    for p in pixels {
        let _ = write!(out, "{},{}", p.id, p.true_classes.join(";"));
        for v in &p.spectrum.reflectance {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Band wavelengths and pixels of a mixture CSV.
pub fn read_mixtures(path: &Path) -> Result<(Vec<f64>, Vec<TestPixel>)> {
    let (header, rows) = csv_records(path)?;
    if header.len() < 3 || &header[0] != "pixel_id" || &header[1] != "true_classes" {
        return Err(parse_err(path, 1, "expected header `pixel_id,true_classes,<wavelengths>`"));
    }
    let wavelengths = header.iter().skip(2).map(|c| parse_f64(path, 1, c)).collect::<Result<Vec<_>>>()?;
    let pixels = rows
        .iter()
        .map(|(line, r)| {
            if r.len() != header.len() {
                return Err(parse_err(path, *line, format!("expected {} cells, found {}", header.len(), r.len())));
            }
            Ok(TestPixel {
                id: r[0].to_string(),
                true_classes: r[1].split(';').filter(|c| !c.is_empty()).map(str::to_string).collect(),
                reflectance: r.iter().skip(2).map(|c| parse_f64(path, *line, c)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((wavelengths, pixels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub pixel_id: String,
    pub spec: MixtureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSidecar {
    pub config_hash: String,
    pub tool_version: String,
    pub model: MixingModel,
    pub pixels: Vec<SpecRecord>,
}

pub fn ns_csv(header: &str, records: &[NsRecord]) -> String {
    let mut out = format!("{header}\npixel_id,ns_deg,degenerate,endmembers\n");
    for r in records {
        let _ = writeln!(out, "{},{:?},{},{}", r.pixel_id, r.ns_deg, r.degenerate as u8, r.endmembers);
    }
    out
}

pub fn read_ns(path: &Path) -> Result<Vec<NsRecord>> {
    let (_, rows) = csv_records(path)?;
    rows.iter()
        .map(|(line, r)| {
            if r.len() != 4 {
                return Err(parse_err(path, *line, "expected 4 cells"));
            }
            Ok(NsRecord {
                pixel_id: r[0].to_string(),
                ns_deg: parse_f64(path, *line, &r[1])?,
                degenerate: parse_flag(path, *line, &r[2])?,
                endmembers: r[3].to_string(),
            })
        })
        .collect()
}

/// Libraries, mixture sets with spec sidecars, and NS records.
pub fn stage_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let header = cfg.header();
    let libs = prepare_libraries(cfg)?;
    let mut written = Vec::new();
    for (name, lib) in [(LIBRARY_TRAIN, &libs.train), (LIBRARY_TEST, &libs.test)] {
        let path = out_path(cfg, name);
        save_library(lib, &path, &[cfg.provenance()])?;
        written.push(path);
    }
    for ds in simulate_mixtures(cfg, &libs.test)? {
        let path = out_path(cfg, &mixtures_file(ds.model));
        write_text(&path, &mixtures_csv(&header, libs.test.wavelengths(), &ds.pixels))?;
        written.push(path);

        let sidecar = SpecSidecar {
            config_hash: cfg.hash(),
            tool_version: TOOL_VERSION.to_string(),
            model: ds.model,
            pixels: ds
                .pixels
                .iter()
                .map(|p| SpecRecord {
                    pixel_id: p.id.clone(),
                    spec: p.spec.clone(),
                })
                .collect(),
        };
        let path = out_path(cfg, &specs_file(ds.model));
        write_text(&path, &serde_json::to_string_pretty(&sidecar)?)?;
        written.push(path);

        let ns = ns_records(&libs.train, &ds.test_pixels())?;
        let path = out_path(cfg, &ns_file(ds.model));
        write_text(&path, &ns_csv(&header, &ns))?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedVariant {
    pub name: String,
    pub config: DetectorConfig,
    pub detectors: Vec<DetectorModel>,
    pub retained: Vec<usize>,
}

/// One `k`: the chain model once, plus every detector variant built on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub config_hash: String,
    pub tool_version: String,
    pub k: usize,
    pub nhmc: NhmcModel,
    pub variants: Vec<ArchivedVariant>,
}

impl ModelArchive {
    pub fn from_trained(model: &TrainedModel, config_hash: &str) -> Self {
        Self {
            format_version: ARCHIVE_FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            k: model.k,
            nhmc: model.nhmc().clone(),
            variants: model
                .banks
                .iter()
                .map(|(name, bank)| ArchivedVariant {
                    name: name.clone(),
                    config: bank.config.clone(),
                    detectors: bank.detectors.clone(),
                    retained: bank.retained.clone(),
                })
                .collect(),
        }
    }

    pub fn into_trained(self) -> Result<TrainedModel> {
        if self.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "archive format {} is not supported (expected {ARCHIVE_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::invalid("archive holds no detector variants"));
        }
        let nhmc = self.nhmc;
        let banks = self
            .variants
            .into_iter()
            .map(|v| {
                (
                    v.name,
                    DetectorBank {
                        nhmc: nhmc.clone(),
                        config: v.config,
                        detectors: v.detectors,
                        retained: v.retained,
                    },
                )
            })
            .collect();
        Ok(TrainedModel { k: self.k, banks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

/// `variant,class,rank,scale,offset,wavelength_nm`; scales are 1-based.
pub fn selected_features_csv(header: &str, model: &TrainedModel, wavelengths: &[f64]) -> String {
    let n_offsets = model.nhmc().n_offsets();
    let mut out = format!("{header}\nvariant,class,rank,scale,offset,wavelength_nm\n");
    for (name, bank) in &model.banks {
        for d in &bank.detectors {
            for (rank, &f) in d.selected.iter().enumerate() {
                let (s, l) = (f / n_offsets, f % n_offsets);
                let wl = wavelengths.get(l).map_or_else(String::new, |w| format!("{w:?}"));
                let _ = writeln!(out, "{name},{},{},{},{l},{wl}", d.class_id, rank + 1, s + 1);
            }
        }
    }
    out
}

fn load_train_library(cfg: &RunConfig) -> Result<SpectralLibrary> {
    let path = out_path(cfg, LIBRARY_TRAIN);
    if !path.exists() {
        return Err(Error::invalid(format!("{} not found; run `simulate` first", path.display())));
    }
    load_library(&path)
}

/// One archive and one selected-feature report per `k`.
pub fn stage_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let train = load_train_library(cfg)?;
    let mut written = Vec::new();
    for &k in &cfg.nhmc.k_grid {
        let model = train_model(cfg, &train, k)?;
        let path = out_path(cfg, &archive_file(k));
        ModelArchive::from_trained(&model, &cfg.hash()).save(&path)?;
        written.push(path);
        let path = out_path(cfg, &selected_features_file(k));
        write_text(&path, &selected_features_csv(&cfg.header(), &model, train.wavelengths()))?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_models(cfg: &RunConfig) -> Result<Vec<TrainedModel>> {
    cfg.nhmc
        .k_grid
        .iter()
        .map(|&k| {
            let path = out_path(cfg, &archive_file(k));
            if !path.exists() {
                return Err(Error::invalid(format!("{} not found; run `train` first", path.display())));
            }
            let model = ModelArchive::load(&path)?.into_trained()?;
            if model.k != k {
                return Err(Error::invalid(format!("{} holds k = {}", path.display(), model.k)));
            }
            Ok(model)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

/// `pixel_id`, one 0/1 column per class, one margin column per class, and
/// `unknown` (set when no detector fired).
pub fn decisions_csv(header: &str, bank: &DetectorBank, pixels: &[TestPixel]) -> Result<String> {
    let classes = bank.classes();
    let mut out = format!("{header}\npixel_id");
    for c in &classes {
        let _ = write!(out, ",{c}");
    }
    for c in &classes {
        let _ = write!(out, ",margin_{c}");
    }
    out.push_str(",unknown\n");
    let labels = pixel_labels(bank, pixels)?;
    for (p, l) in pixels.iter().zip(&labels) {
        let det = bank.detect_k(l, None)?;
        out.push_str(&p.id);
        for &d in &det.decisions {
            let _ = write!(out, ",{}", d as u8);
        }
        for m in &det.margins {
            let _ = write!(out, ",{m:?}");
        }
        let _ = writeln!(out, ",{}", det.unknown() as u8);
    }
    Ok(out)
}

/// Rows are pixels; columns are `pixel_id`, `converged`, then one
/// `sample_id:class` column per library sample.
pub fn abundances_csv(header: &str, lambda: f64, lib: &SpectralLibrary, pixels: &[TestPixel], a: &DMatrix<f64>, converged: bool) -> String {
    let mut out = format!("{header}\n# lambda={lambda:?}\npixel_id,converged");
    for s in lib.samples() {
        let _ = write!(out, ",{}:{}", s.id, s.class_label.as_deref().unwrap_or_default());
    }
    out.push('\n');
    for (j, p) in pixels.iter().enumerate() {
        let _ = write!(out, "{},{}", p.id, converged as u8);
        for v in a.column(j).iter() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Abundance file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceTable {
    pub lambda: f64,
    pub pixel_ids: Vec<String>,
    /// Class label of every library column.
    pub sample_classes: Vec<String>,
    /// `N_lib × n_pixels`.
    pub abundances: DMatrix<f64>,
    pub converged: bool,
}

pub fn read_abundances(path: &Path) -> Result<AbundanceTable> {
    let text = read_text(path)?;
    let lambda = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# lambda="))
        .ok_or_else(|| parse_err(path, 1, "missing `# lambda=` comment"))
        .and_then(|v| parse_f64(path, 2, v))?;
    let (header, rows) = csv_records(path)?;
    if header.len() < 3 || &header[0] != "pixel_id" || &header[1] != "converged" {
        return Err(parse_err(path, 1, "expected header `pixel_id,converged,<sample_id:class>...`"));
    }
    let sample_classes = header
        .iter()
        .skip(2)
        .map(|c| {
            c.rsplit_once(':')
                .map(|(_, class)| class.to_string())
                .ok_or_else(|| parse_err(path, 1, format!("column `{c}` lacks a `:class` suffix")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_lib = sample_classes.len();
    let mut values = Vec::with_capacity(n_lib * rows.len());
    let mut pixel_ids = Vec::with_capacity(rows.len());
    let mut converged = true;
    for (line, r) in &rows {
        if r.len() != header.len() {
            return Err(parse_err(path, *line, format!("expected {} cells, found {}", header.len(), r.len())));
        }
        pixel_ids.push(r[0].to_string());
        converged &= parse_flag(path, *line, &r[1])?;
        for c in r.iter().skip(2) {
            values.push(parse_f64(path, *line, c)?);
        }
    }
    Ok(AbundanceTable {
        lambda,
        pixel_ids,
        sample_classes,
        abundances: DMatrix::from_column_slice(n_lib, rows.len(), &values),
        converged,
    })
}

fn load_pixels(cfg: &RunConfig, model: MixingModel) -> Result<Vec<TestPixel>> {
    let path = out_path(cfg, &mixtures_file(model));
    if !path.exists() {
        return Err(Error::invalid(format!("{} not found; run `simulate` first", path.display())));
    }
    Ok(read_mixtures(&path)?.1)
}

/// Decision tables of the full detector for every `k`, and baseline
/// abundances for every `λ`.
pub fn stage_detect(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let header = cfg.header();
    let models = load_models(cfg)?;
    let mut written = Vec::new();
    let solver_lib = if cfg.baseline.enabled {
        let lib = load_train_library(cfg)?;
        Some((baseline_solver(cfg, &lib)?, lib))
    } else {
        None
    };
    for &model in &cfg.mixing.models {
        let pixels = load_pixels(cfg, model)?;
        for m in &models {
            let bank = m
                .bank(Variant::FULL.name)
                .ok_or_else(|| Error::invalid(format!("archive k={} lacks the full detector", m.k)))?;
            let path = out_path(cfg, &decisions_file(m.k, model));
            write_text(&path, &decisions_csv(&header, bank, &pixels)?)?;
            written.push(path);
        }
        if let Some((solver, lib)) = &solver_lib {
            for method in [Baseline::Sunsal, Baseline::Clsunsal] {
                for (idx, &lambda) in method.lambdas(cfg).iter().enumerate() {
                    let res = unmix(solver, cfg, method, lambda, &pixels)?;
                    let path = out_path(cfg, &abundances_file(method, idx, model));
                    write_text(&path, &abundances_csv(&header, lambda, lib, &pixels, &res.abundances, res.converged))?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn params_cell(params: &[(String, f64)]) -> String {
    params
        .iter()
        .map(|(n, v)| format!("{n}={v:?}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn mesh_csv(header: &str, mesh: &crate::evaluation::RocMesh) -> String {
    let names: Vec<&str> = mesh
        .points
        .first()
        .map(|p| p.params.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    let mut out = format!("{header}\n");
    for n in &names {
        let _ = write!(out, "{n},");
    }
    out.push_str("recall,far,distance\n");
    for p in &mesh.points {
        for (_, v) in &p.params {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{:?},{:?},{:?}", p.recall, p.far, p.distance());
    }
    out
}

fn summary_csv(header: &str, ev: &Evaluation) -> String {
    let mut out = format!("{header}\nmethod,model,mean_ns_deg,d_roc,recall,far,params\n");
    for r in &ev.summary {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{}",
            r.method,
            r.model.name(),
            r.mean_ns,
            r.d_roc,
            r.best.recall,
            r.best.far,
            params_cell(&r.best.params)
        );
    }
    out
}

fn models_in_order(ev: &Evaluation) -> Vec<(MixingModel, f64)> {
    let mut models: Vec<(MixingModel, f64)> = Vec::new();
    for r in &ev.summary {
        if !models.iter().any(|(m, _)| *m == r.model) {
            models.push((r.model, r.mean_ns));
        }
    }
    models
}

/// d_ROC of each ablation per model, columns ordered from plain to full.
fn table_iii_csv(header: &str, ev: &Evaluation) -> String {
    let columns: Vec<(&str, &str)> = Variant::ABLATIONS
        .iter()
        .map(|v| (v.name, v.name))
        .chain([(Variant::FULL.name, NHMC_ED)])
        .collect();
    let mut out = format!("{header}\nmodel");
    for (label, _) in &columns {
        let _ = write!(out, ",{label}");
    }
    out.push('\n');
    for (model, _) in models_in_order(ev) {
        out.push_str(model.name());
        for (_, method) in &columns {
            let _ = write!(out, ",{}", opt_cell(ev.d_roc(method, model)));
        }
        out.push('\n');
    }
    out
}

/// Baselines against the full method, rows by increasing mean NS.
fn table_iv_csv(header: &str, ev: &Evaluation) -> String {
    let mut models = models_in_order(ev);
    models.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut out = format!("{header}\nmodel,ns_deg,{SUNSAL},{CLSUNSAL},{NHMC_ED}\n");
    for (model, ns) in models {
        let _ = writeln!(
            out,
            "{},{ns:?},{},{},{}",
            model.name(),
            opt_cell(ev.d_roc(SUNSAL, model)),
            opt_cell(ev.d_roc(CLSUNSAL, model)),
            opt_cell(ev.d_roc(NHMC_ED, model))
        );
    }
    out
}

fn per_class_csv(header: &str, ev: &Evaluation) -> String {
    let mut out = format!("{header}\nmethod,model,class,recall,far\n");
    for r in &ev.per_class {
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.model.name(), r.class, opt_cell(r.recall), opt_cell(r.far));
    }
    out
}

/// One row per bin with a d_ROC column per method.
fn ns_bins_csv(header: &str, ev: &Evaluation) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in &ev.ns_bins {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = format!("{header}\nlo_deg,hi_deg,n_pixels");
    for m in &methods {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    let first = methods.first().copied().unwrap_or_default();
    for row in ev.ns_bins.iter().filter(|r| r.method == first) {
        let _ = write!(out, "{:?},{:?},{}", row.lo, row.hi, row.n_pixels);
        for m in &methods {
            let d = ev
                .ns_bins
                .iter()
                .find(|r| r.method == *m && r.lo == row.lo)
                .and_then(|r| r.d_roc);
            let _ = write!(out, ",{}", opt_cell(d));
        }
        out.push('\n');
    }
    out
}

/// Writes meshes and report tables; returns the paths.
pub fn write_evaluation(cfg: &RunConfig, ev: &Evaluation) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let header = cfg.header();
    let mut files: Vec<(String, String)> = ev
        .meshes
        .iter()
        .map(|(method, model, mesh)| (mesh_file(method, *model), mesh_csv(&header, mesh)))
        .collect();
    files.push(("summary.csv".into(), summary_csv(&header, ev)));
    if cfg.detector.ablations {
        files.push(("table_iii.csv".into(), table_iii_csv(&header, ev)));
    }
    files.push(("table_iv.csv".into(), table_iv_csv(&header, ev)));
    files.push(("per_class.csv".into(), per_class_csv(&header, ev)));
    files.push(("ns_bins.csv".into(), ns_bins_csv(&header, ev)));
    files
        .into_iter()
        .map(|(name, text)| {
            let path = out_path(cfg, &name);
            write_text(&path, &text)?;
            Ok(path)
        })
        .collect()
}

/// Rebuilds every method run from the files of the earlier stages and
/// scores them.
pub fn evaluate_files(cfg: &RunConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let first = models[0]
        .bank(Variant::FULL.name)
        .ok_or_else(|| Error::invalid("archive lacks the full detector"))?;
    let classes: Vec<String> = first.classes().into_iter().map(str::to_string).collect();
    let mut loaded = Vec::new();
    for &model in &cfg.mixing.models {
        let pixels = load_pixels(cfg, model)?;
        let ns = read_ns(&out_path(cfg, &ns_file(model)))?;
        if ns.len() != pixels.len() || ns.iter().zip(&pixels).any(|(r, p)| r.pixel_id != p.id) {
            return Err(Error::invalid(format!("{} does not match the pixels of {model}", ns_file(model))));
        }
        let truth = truth_flags(&pixels, &classes)?;
        let mut runs = Vec::new();
        for v in cfg.variants() {
            let method = if v == Variant::FULL { NHMC_ED } else { v.name };
            runs.push(nhmc_run(&models, v.name, method, model, &pixels, &cfg.detector.k_features)?);
        }
        if cfg.baseline.enabled {
            let thresholds = crate::sparse::threshold_grid(cfg.baseline.n_thresholds);
            for method in [Baseline::Sunsal, Baseline::Clsunsal] {
                let mut run = MethodRun {
                    method: method.name().to_string(),
                    model,
                    n_classes: classes.len(),
                    params: Vec::new(),
                    decisions: Vec::new(),
                };
                for (idx, &lambda) in method.lambdas(cfg).iter().enumerate() {
                    let path = out_path(cfg, &abundances_file(method, idx, model));
                    let table = read_abundances(&path)?;
                    if table.lambda != lambda {
                        return Err(Error::invalid(format!(
                            "{} holds lambda = {}, config expects {lambda}",
                            path.display(),
                            table.lambda
                        )));
                    }
                    if table.pixel_ids.len() != pixels.len() || table.pixel_ids.iter().zip(&pixels).any(|(a, p)| *a != p.id) {
                        return Err(Error::invalid(format!("{} does not match the pixels of {model}", path.display())));
                    }
                    let sample_class = table
                        .sample_classes
                        .iter()
                        .map(|c| {
                            classes
                                .iter()
                                .position(|x| x == c)
                                .ok_or_else(|| Error::invalid(format!("{}: class {c} has no detector", path.display())))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    extend_baseline_run(&mut run, lambda, &table.abundances, &sample_class, &thresholds);
                }
                runs.push(run);
            }
        }
        loaded.push((model, truth, ns, runs));
    }
    let datasets: Vec<DatasetRuns<'_>> = loaded
        .iter()
        .map(|(model, truth, ns, runs)| DatasetRuns {
            model: *model,
            truth: truth.clone(),
            ns,
            runs: runs.clone(),
        })
        .collect();
    evaluate_runs(&datasets, &classes, cfg)
}

pub fn stage_evaluate(cfg: &RunConfig) -> Result<(Evaluation, Vec<PathBuf>)> {
    let ev = evaluate_files(cfg)?;
    let written = write_evaluation(cfg, &ev)?;
    Ok((ev, written))
}

/// simulate → train → detect → evaluate.
pub fn stage_report(cfg: &RunConfig) -> Result<(Evaluation, Vec<PathBuf>)> {
    let mut written = stage_simulate(cfg)?;
    written.extend(stage_train(cfg)?);
    written.extend(stage_detect(cfg)?);
    let (ev, files) = stage_evaluate(cfg)?;
    written.extend(files);
    Ok((ev, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.library.n_classes = 3;
        cfg.library.samples_per_class = 6;
        cfg.library.n_bands = 64;
        cfg.nhmc.n_scales = 4;
        cfg.nhmc.k_grid = vec![2];
        cfg.nhmc.em.max_iters = 15;
        cfg.mixing.models = vec![MixingModel::Lmm, MixingModel::Sm];
        cfg.mixing.n_endmembers = 2;
        cfg.mixing.n_combos = 3;
        cfg.mixing.n_weights = 4;
        cfg.detector.k_features = vec![1, 2, 4];
        cfg.detector.attenuation = vec![0.5, 1.0];
        cfg.baseline.n_thresholds = 5;
        cfg.baseline.sunsal_lambdas = vec![0.0, 1e-3];
        cfg.baseline.clsunsal_lambdas = vec![1e-3];
        cfg
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(method_slug("NCFE+LA+NB"), "NCFE-LA-NB");
        assert_eq!(method_slug("NHMC-ED"), "NHMC-ED");
    }

    #[test]
    fn archive_round_trip_preserves_decisions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let libs = prepare_libraries(&cfg).unwrap();
        let model = train_model(&cfg, &libs.train, 2).unwrap();
        let path = dir.path().join("a.json");
        ModelArchive::from_trained(&model, &cfg.hash()).save(&path).unwrap();
        let back = ModelArchive::load(&path).unwrap().into_trained().unwrap();
        let mut expected = model.clone();
        for (_, bank) in &mut expected.banks {
            bank.nhmc.report.traces.clear();
        }
        assert_eq!(back, expected);
        let pixels: Vec<TestPixel> = simulate_mixtures(&cfg, &libs.test).unwrap()[0].test_pixels();
        for (name, bank) in &model.banks {
            let other = back.bank(name).unwrap();
            for l in pixel_labels(bank, &pixels).unwrap() {
                assert_eq!(bank.detect_k(&l, None).unwrap(), other.detect_k(&l, None).unwrap());
            }
        }
    }

    #[test]
    fn file_stages_match_in_memory_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let (ev, written) = stage_report(&cfg).unwrap();
        assert!(written.iter().all(|p| p.exists()));
        let mem = run_benchmark(&cfg).unwrap();
        assert_eq!(ev.summary, mem.evaluation.summary);
        assert_eq!(ev.ns_bins, mem.evaluation.ns_bins);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with(&cfg.header()));
        // 6 methods x 2 models, plus header lines
        assert_eq!(summary.lines().count(), 2 + 12);
    }

    #[test]
    fn decisions_table_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_simulate(&cfg).unwrap();
        stage_train(&cfg).unwrap();
        stage_detect(&cfg).unwrap();
        let (header, rows) = csv_records(&dir.path().join(decisions_file(2, MixingModel::Lmm))).unwrap();
        assert_eq!(header.len(), 1 + 3 + 3 + 1);
        assert_eq!(rows.len(), 12);
        for (_, r) in rows {
            let any = (1..4).any(|i| &r[i] == "1");
            assert_eq!(&r[7] == "1", !any);
        }
        let table = read_abundances(&dir.path().join(abundances_file(Baseline::Sunsal, 1, MixingModel::Sm))).unwrap();
        assert_eq!(table.lambda, 1e-3);
        assert_eq!(table.abundances.ncols(), 12);
    }

    #[test]
    fn mixtures_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_simulate(&cfg).unwrap();
        let libs = prepare_libraries(&cfg).unwrap();
        let ds = &simulate_mixtures(&cfg, &libs.test).unwrap()[1];
        let (wl, pixels) = read_mixtures(&dir.path().join(mixtures_file(ds.model))).unwrap();
        assert_eq!(wl, libs.test.wavelengths());
        assert_eq!(pixels, ds.test_pixels());
        let ns = read_ns(&dir.path().join(ns_file(ds.model))).unwrap();
        assert_eq!(ns, ns_records(&libs.train, &pixels).unwrap());
    }
}
