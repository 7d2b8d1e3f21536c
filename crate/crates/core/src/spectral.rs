//! Spectra, spectral libraries, library CSV I/O, the synthetic library
//! generator and the train/test split protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::hapke::{self, HapkeGeometry};
use crate::rng;

/// Acquisition geometry in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub incidence_deg: f64,
    pub emission_deg: f64,
}

impl Geometry {
    pub const LAB_DEFAULT: Geometry = Geometry {
        incidence_deg: 30.0,
        emission_deg: 0.0,
    };

    pub fn new(incidence_deg: f64, emission_deg: f64) -> Self {
        Self {
            incidence_deg,
            emission_deg,
        }
    }
}

/// One reflectance spectrum on a wavelength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub id: String,
    pub wavelengths: Vec<f64>,
    pub reflectance: Vec<f64>,
    pub class_label: Option<String>,
    pub geometry: Option<Geometry>,
}

impl Spectrum {
    /// Checked constructor for library samples: reflectance must be finite
    /// and nonnegative.
    pub fn new(
        id: impl Into<String>,
        wavelengths: Vec<f64>,
        reflectance: Vec<f64>,
        class_label: Option<String>,
    ) -> Result<Self> {
        let s = Self::observed(id, wavelengths, reflectance)?;
        if let Some((i, v)) = s
            .reflectance
            .iter()
            .enumerate()
            .find(|(_, v)| **v < 0.0)
        {
            return Err(Error::invalid(format!(
                "spectrum {}: negative reflectance {v} at band {i}",
                s.id
            )));
        }
        Ok(Self { class_label, ..s })
    }

    /// Constructor for observed (mixed, noisy) spectra, which may dip below
    /// zero. Only finiteness and grid validity are checked.
    pub fn observed(id: impl Into<String>, wavelengths: Vec<f64>, reflectance: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if wavelengths.len() != reflectance.len() {
            return Err(Error::dim(
                format!("spectrum {id} reflectance"),
                wavelengths.len(),
                reflectance.len(),
            ));
        }
        if wavelengths.len() < 2 {
            return Err(Error::invalid(format!("spectrum {id}: need at least 2 bands")));
        }
        check_grid(&wavelengths)?;
        if reflectance.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("spectrum {id}: non-finite reflectance")));
        }
        Ok(Self {
            id,
            wavelengths,
            reflectance,
            class_label: None,
            geometry: None,
        })
    }

    pub fn len(&self) -> usize {
        self.reflectance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reflectance.is_empty()
    }

    /// Same spectrum with reflectance scaled pointwise by `factor`.
    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum {
            reflectance: self.reflectance.iter().map(|r| r * factor).collect(),
            ..self.clone()
        }
    }
}

fn check_grid(wl: &[f64]) -> Result<()> {
    if wl.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("non-finite wavelength"));
    }
    if let Some(i) = wl.windows(2).position(|p| p[1] <= p[0]) {
        return Err(Error::invalid(format!(
            "wavelengths not strictly increasing at band {}",
            i + 1
        )));
    }
    Ok(())
}

/// Ordered collection of labelled spectra sharing one wavelength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralLibrary {
    samples: Vec<Spectrum>,
    class_order: Vec<String>,
    class_index: BTreeMap<String, Vec<usize>>,
}

impl SpectralLibrary {
    /// Builds a library; every sample must carry a class label and share the
    /// first sample's wavelength grid.
    pub fn new(samples: Vec<Spectrum>) -> Result<Self> {
        let mut class_order = Vec::new();
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        if let Some(first) = samples.first() {
            for (i, s) in samples.iter().enumerate() {
                if s.wavelengths != first.wavelengths {
                    return Err(Error::invalid(format!(
                        "sample {} does not share the library wavelength grid",
                        s.id
                    )));
                }
                let label = s
                    .class_label
                    .clone()
                    .ok_or_else(|| Error::invalid(format!("sample {} has no class label", s.id)))?;
                let entry = class_index.entry(label.clone()).or_default();
                if entry.is_empty() {
                    class_order.push(label);
                }
                entry.push(i);
            }
        }
        Ok(Self {
            samples,
            class_order,
            class_index,
        })
    }

    pub fn samples(&self) -> &[Spectrum] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class identifiers in order of first appearance.
    pub fn classes(&self) -> &[String] {
        &self.class_order
    }

    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Sample indices belonging to `class`.
    pub fn class_members(&self, class: &str) -> &[usize] {
        self.class_index.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.class_index
    }

    pub fn wavelengths(&self) -> &[f64] {
        self.samples.first().map(|s| s.wavelengths.as_slice()).unwrap_or(&[])
    }

    pub fn n_bands(&self) -> usize {
        self.wavelengths().len()
    }

    /// Class label of sample `i`.
    pub fn label(&self, i: usize) -> &str {
        self.samples[i].class_label.as_deref().unwrap_or_default()
    }

    /// Library restricted to the given sample indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

/// Parses a header cell `id:class` with an optional `@i<inc>e<em>` suffix.
fn parse_header_cell(cell: &str) -> std::result::Result<(String, String, Option<Geometry>), String> {
    let (body, geometry) = match cell.rsplit_once('@') {
        Some((body, geo)) => (body, Some(parse_geometry(geo)?)),
        None => (cell, None),
    };
    let (id, class) = body
        .split_once(':')
        .ok_or_else(|| format!("header cell `{cell}` is not of the form sample_id:class_label"))?;
    if id.is_empty() || class.is_empty() {
        return Err(format!("header cell `{cell}` has an empty id or class"));
    }
    Ok((id.to_string(), class.to_string(), geometry))
}

fn parse_geometry(s: &str) -> std::result::Result<Geometry, String> {
    let rest = s
        .strip_prefix('i')
        .ok_or_else(|| format!("geometry suffix `@{s}` must look like @i30e0"))?;
    let (inc, em) = rest
        .split_once('e')
        .ok_or_else(|| format!("geometry suffix `@{s}` must look like @i30e0"))?;
    let inc: f64 = inc.parse().map_err(|_| format!("bad incidence angle in `@{s}`"))?;
    let em: f64 = em.parse().map_err(|_| format!("bad emission angle in `@{s}`"))?;
    Ok(Geometry::new(inc, em))
}

fn format_geometry(g: &Geometry) -> String {
    format!("@i{}e{}", g.incidence_deg, g.emission_deg)
}

/// Reads a library CSV (see README for the grammar).
pub fn load_library(path: impl AsRef<Path>) -> Result<SpectralLibrary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_library(&text, path)
}

/// Parses library CSV text. `origin` is only used in error messages.
pub fn parse_library(text: &str, origin: &Path) -> Result<SpectralLibrary> {
    let perr = |line: u64, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut header: Option<Vec<(String, String, Option<Geometry>)>> = None;
    let mut wavelengths = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match &header {
            None => {
                let mut cells = record.iter();
                let first = cells.next().unwrap_or_default().trim();
                if first != "wavelength_nm" {
                    return Err(perr(line, format!("expected `wavelength_nm` header, found `{first}`")));
                }
                let parsed = cells
                    .map(|c| parse_header_cell(c.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|m| perr(line, m))?;
                if parsed.is_empty() {
                    return Err(perr(line, "header names no samples".into()));
                }
                columns = vec![Vec::new(); parsed.len()];
                header = Some(parsed);
            }
            Some(h) => {
                if record.len() != h.len() + 1 {
                    return Err(perr(
                        line,
                        format!("expected {} fields, found {}", h.len() + 1, record.len()),
                    ));
                }
                let mut values = record.iter().map(|c| c.trim().parse::<f64>());
                let wl = values
                    .next()
                    .and_then(|v| v.ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(line, "malformed wavelength".into()))?;
                if let Some(&prev) = wavelengths.last() {
                    if wl <= prev {
                        return Err(perr(line, format!("wavelength {wl} not greater than {prev}")));
                    }
                }
                wavelengths.push(wl);
                for (j, v) in values.enumerate() {
                    let v = v.map_err(|_| perr(line, format!("malformed reflectance in column {}", j + 2)))?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(perr(
                            line,
                            format!("reflectance {v} for sample {} must be finite and >= 0", h[j].0),
                        ));
                    }
                    columns[j].push(v);
                }
            }
        }
    }
    let header = header.ok_or_else(|| perr(1, "empty library file".into()))?;
    if wavelengths.len() < 2 {
        return Err(perr(1, "library needs at least 2 wavelength rows".into()));
    }
    let samples = header
        .into_iter()
        .zip(columns)
        .map(|((id, class, geometry), refl)| {
            let mut s = Spectrum::new(id, wavelengths.clone(), refl, Some(class))?;
            s.geometry = geometry;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    SpectralLibrary::new(samples)
}

/// Renders a library as CSV text, optionally preceded by comment lines.
pub fn library_to_csv(lib: &SpectralLibrary, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str("wavelength_nm");
    for s in lib.samples() {
        let _ = write!(out, ",{}:{}", s.id, s.class_label.as_deref().unwrap_or_default());
        if let Some(g) = &s.geometry {
            out.push_str(&format_geometry(g));
        }
    }
    out.push('\n');
    for (b, wl) in lib.wavelengths().iter().enumerate() {
        let _ = write!(out, "{wl:?}");
        for s in lib.samples() {
            let _ = write!(out, ",{:?}", s.reflectance[b]);
        }
        out.push('\n');
    }
    out
}

pub fn save_library(lib: &SpectralLibrary, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(library_to_csv(lib, comments).as_bytes())
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic library
// ---------------------------------------------------------------------------

/// One Gaussian absorption band, depth relative to the continuum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionBand {
    pub center_nm: f64,
    pub width_nm: f64,
    pub depth: f64,
}

/// Mean shape of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Continuum level at the first wavelength.
    pub level: f64,
    /// Continuum change across the full wavelength range.
    pub slope: f64,
    /// Fractional drop of the continuum at the short-wavelength end.
    pub edge_depth: f64,
    /// e-folding length of that drop, in nm.
    pub edge_width_nm: f64,
    pub bands: Vec<AbsorptionBand>,
}

/// Parameters of the synthetic library generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLibraryConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_bands: usize,
    pub wavelength_min_nm: f64,
    pub wavelength_max_nm: f64,
    /// Relative standard deviation of per-sample band depth scaling.
    pub depth_jitter: f64,
    /// Standard deviation of per-sample continuum slope change.
    pub slope_jitter: f64,
    /// Relative standard deviation of per-sample continuum level.
    pub level_jitter: f64,
    /// Standard deviation of per-sample band center shift, in nm.
    pub center_jitter_nm: f64,
    /// Standard deviation of the per-sample log grain-size factor. A grain
    /// factor `g` maps single-scattering albedo `w` to `w^g`, a nonlinear
    /// within-class variation no cone of samples spans exactly.
    pub grain_jitter: f64,
}

impl SyntheticLibraryConfig {
    pub fn new(n_classes: usize, samples_per_class: usize, n_bands: usize) -> Self {
        Self {
            n_classes,
            samples_per_class,
            n_bands,
            wavelength_min_nm: 400.0,
            wavelength_max_nm: 2500.0,
            depth_jitter: 0.15,
            slope_jitter: 0.06,
            level_jitter: 0.1,
            center_jitter_nm: 10.0,
            grain_jitter: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let jitters = [
            self.depth_jitter,
            self.slope_jitter,
            self.level_jitter,
            self.center_jitter_nm,
            self.grain_jitter,
        ];
        if jitters.iter().any(|j| !(j.is_finite() && *j >= 0.0)) {
            return Err(Error::invalid("synthetic jitter parameters must be finite and nonnegative"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("synthetic library needs n_classes >= 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid("synthetic library needs samples_per_class >= 2"));
        }
        if self.n_bands < 64 {
            return Err(Error::invalid("synthetic library needs at least 64 bands"));
        }
        if !(self.wavelength_max_nm > self.wavelength_min_nm) {
            return Err(Error::invalid("synthetic wavelength range is empty"));
        }
        Ok(())
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let step = (self.wavelength_max_nm - self.wavelength_min_nm) / (self.n_bands - 1) as f64;
        (0..self.n_bands)
            .map(|i| self.wavelength_min_nm + step * i as f64)
            .collect()
    }

    /// Class mean shapes. Each class owns a primary band in its own slice of
    /// the wavelength range plus one or two secondary bands.
    pub fn class_profiles(&self, seed: u64) -> Vec<ClassProfile> {
        let span = self.wavelength_max_nm - self.wavelength_min_nm;
        let margin = 0.05 * span;
        let slot = (span - 2.0 * margin) / self.n_classes as f64;
        (0..self.n_classes)
            .map(|c| {
                let mut r = rng::stream(seed, rng::task_id(1, c as u64, 0));
                let primary = AbsorptionBand {
                    center_nm: self.wavelength_min_nm + margin + slot * (c as f64 + r.gen_range(0.3..0.7)),
                    width_nm: r.gen_range(40.0..150.0),
                    depth: r.gen_range(0.3..0.6),
                };
                let mut bands = vec![primary];
                let n_secondary = r.gen_range(1..=2);
                for _ in 0..n_secondary {
                    bands.push(AbsorptionBand {
                        center_nm: r.gen_range(self.wavelength_min_nm + margin..self.wavelength_max_nm - margin),
                        width_nm: r.gen_range(20.0..80.0),
                        depth: r.gen_range(0.08..0.25),
                    });
                }
                ClassProfile {
                    name: format!("class{c:02}"),
                    level: r.gen_range(0.2..0.8),
                    slope: r.gen_range(-0.25..0.35),
                    edge_depth: r.gen_range(0.0..0.7),
                    edge_width_nm: r.gen_range(100.0..500.0),
                    bands,
                }
            })
            .collect()
    }

    /// Renders one noise-free sample of `profile` with the given perturbation.
    pub fn render(
        &self,
        profile: &ClassProfile,
        wavelengths: &[f64],
        depth_scale: f64,
        slope_delta: f64,
        level_scale: f64,
        center_shift: f64,
    ) -> Vec<f64> {
        let span = self.wavelength_max_nm - self.wavelength_min_nm;
        wavelengths
            .iter()
            .map(|&wl| {
                let x = (wl - self.wavelength_min_nm) / span;
                let edge = 1.0 - profile.edge_depth * (-(wl - self.wavelength_min_nm) / profile.edge_width_nm).exp();
                let continuum = (profile.level * level_scale + (profile.slope + slope_delta) * x) * edge;
                let absorption: f64 = profile
                    .bands
                    .iter()
                    .map(|b| {
                        let z = (wl - b.center_nm - center_shift) / b.width_nm;
                        b.depth * depth_scale * (-0.5 * z * z).exp()
                    })
                    .sum();
                (continuum * (1.0 - absorption.min(0.95))).clamp(0.01, 1.0)
            })
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<SpectralLibrary> {
        self.validate()?;
        let wavelengths = self.wavelengths();
        let profiles = self.class_profiles(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut samples = Vec::with_capacity(self.n_classes * self.samples_per_class);
        for (c, profile) in profiles.iter().enumerate() {
            let mut r = rng::stream(seed, rng::task_id(2, c as u64, 0));
            for j in 0..self.samples_per_class {
                let depth_scale = (1.0 + self.depth_jitter * unit.sample(&mut r)).max(0.2);
                let slope_delta = self.slope_jitter * unit.sample(&mut r);
                let level_scale = (1.0 + self.level_jitter * unit.sample(&mut r)).max(0.5);
                let center_shift = self.center_jitter_nm * unit.sample(&mut r);
                let grain = (self.grain_jitter * unit.sample(&mut r)).exp();
                let refl = self.render(profile, &wavelengths, depth_scale, slope_delta, level_scale, center_shift);
                let refl = apply_grain_size(&refl, grain)?;
                samples.push(Spectrum::new(
                    format!("{}_{j:03}", profile.name),
                    wavelengths.clone(),
                    refl,
                    Some(profile.name.clone()),
                )?);
            }
        }
        SpectralLibrary::new(samples)
    }
}

/// Rescales the optical path of every band: `w ↦ w^grain` in Hapke
/// single-scattering albedo at normal geometry.
fn apply_grain_size(refl: &[f64], grain: f64) -> Result<Vec<f64>> {
    let g = HapkeGeometry::normal();
    refl.iter()
        .map(|&r| {
            let w = hapke::reflectance_to_ssa(r.clamp(0.01, 0.99), &g)?.ssa;
            Ok(hapke::ssa_to_reflectance(w.powf(grain), &g)?.clamp(0.01, 1.0))
        })
        .collect()
}

/// Generates a library of Gaussian absorption bands on sloped continua.
pub fn generate_synthetic_library(
    n_classes: usize,
    samples_per_class: usize,
    n_bands: usize,
    seed: u64,
) -> Result<SpectralLibrary> {
    SyntheticLibraryConfig::new(n_classes, samples_per_class, n_bands).generate(seed)
}

// ---------------------------------------------------------------------------
// Train/test split
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(points: &[&[f64]], members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for &m in members {
        for (ci, v) in c.iter_mut().zip(points[m]) {
            *ci += v;
        }
    }
    let n = members.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Two-means clustering of `points`, returning a 0/1 assignment.
///
/// Seeded with the farthest pair, refined with Lloyd iterations and then
/// single-point (Hartigan) moves, so that no single reassignment lowers the
/// within-cluster sum of squares.
pub fn two_means(points: &[&[f64]]) -> Vec<u8> {
    let n = points.len();
    assert!(n >= 2, "two_means needs at least two points");
    let (mut sa, mut sb, mut best) = (0, 1, -1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(points[i], points[j]);
            if d > best {
                best = d;
                sa = i;
                sb = j;
            }
        }
    }
    let mut centers = [points[sa].to_vec(), points[sb].to_vec()];
    let mut assign = vec![0u8; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = u8::from(sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]));
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        let groups: [Vec<usize>; 2] = [0u8, 1].map(|g| (0..n).filter(|&i| assign[i] == g).collect());
        if groups.iter().any(Vec::is_empty) {
            // farthest-pair seeds always keep both clusters non-empty unless
            // every point is identical
            break;
        }
        centers = [centroid(points, &groups[0]), centroid(points, &groups[1])];
        if !changed {
            break;
        }
    }
    // Hartigan refinement
    loop {
        let groups: [Vec<usize>; 2] = [0u8, 1].map(|g| (0..n).filter(|&i| assign[i] == g).collect());
        if groups.iter().any(Vec::is_empty) {
            break;
        }
        let centers = [centroid(points, &groups[0]), centroid(points, &groups[1])];
        let mut moved = false;
        for i in 0..n {
            let from = assign[i] as usize;
            let to = 1 - from;
            let (nf, nt) = (groups[from].len() as f64, groups[to].len() as f64);
            if nf <= 1.0 {
                continue;
            }
            let gain = nf / (nf - 1.0) * sq_dist(points[i], &centers[from]);
            let cost = nt / (nt + 1.0) * sq_dist(points[i], &centers[to]);
            if cost < gain * (1.0 - 1e-12) {
                assign[i] = to as u8;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    assign
}

/// Within-cluster sum of squares of a 0/1 assignment.
pub fn within_cluster_ss(points: &[&[f64]], assign: &[u8]) -> f64 {
    let mut total = 0.0;
    for g in [0u8, 1] {
        let members: Vec<usize> = (0..points.len()).filter(|&i| assign[i] == g).collect();
        if members.is_empty() {
            continue;
        }
        let c = centroid(points, &members);
        total += members.iter().map(|&m| sq_dist(points[m], &c)).sum::<f64>();
    }
    total
}

/// Splits every class into a training and a testing cluster by 2-means on the
/// reflectance vectors. The larger cluster becomes the training set; on equal
/// sizes the cluster with the lower mean sample index does.
///
/// The seed is accepted for interface stability; the farthest-pair seeding
/// makes the split deterministic without it.
pub fn split_train_test_kmeans(lib: &SpectralLibrary, _seed: u64) -> Result<(SpectralLibrary, SpectralLibrary)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in lib.classes() {
        let members = lib.class_members(class);
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "class {class} has {} sample(s); the split needs at least 2",
                members.len()
            )));
        }
        let points: Vec<&[f64]> = members
            .iter()
            .map(|&i| lib.samples()[i].reflectance.as_slice())
            .collect();
        let assign = two_means(&points);
        let group = |g: u8| -> Vec<usize> {
            members
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == g)
                .map(|(m, _)| *m)
                .collect()
        };
        let (g0, g1) = (group(0), group(1));
        let mean = |g: &[usize]| g.iter().sum::<usize>() as f64 / g.len().max(1) as f64;
        let zero_is_train = match g0.len().cmp(&g1.len()) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => mean(&g0) <= mean(&g1),
        };
        let (tr, te) = if zero_is_train { (g0, g1) } else { (g1, g0) };
        train.extend(tr);
        test.extend(te);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((lib.subset(&train)?, lib.subset(&test)?))
}

/// Tops up every class to `target_count` samples with within-class Hapke
/// mixtures of two randomly drawn members.
pub fn equalize_classes_hapke(
    train: &SpectralLibrary,
    target_count: usize,
    geometry: Geometry,
    seed: u64,
) -> Result<SpectralLibrary> {
    let max = train
        .classes()
        .iter()
        .map(|c| train.class_members(c).len())
        .max()
        .unwrap_or(0);
    if target_count < max {
        return Err(Error::invalid(format!(
            "target_count {target_count} is below the largest class size {max}"
        )));
    }
    let hg = HapkeGeometry::from_degrees(geometry.incidence_deg, geometry.emission_deg)?;
    let mut samples: Vec<Spectrum> = train.samples().to_vec();
    for (c, class) in train.classes().iter().enumerate() {
        let members = train.class_members(class);
        if members.is_empty() {
            continue;
        }
        let mut r = rng::stream(seed, rng::task_id(3, c as u64, 0));
        for n in 0..target_count.saturating_sub(members.len()) {
            let a = &train.samples()[members[r.gen_range(0..members.len())]];
            let b = &train.samples()[members[r.gen_range(0..members.len())]];
            let w = crate::mixing::sample_simplex(&mut r, 2);
            let refl = hapke::mix_reflectance(&[&a.reflectance, &b.reflectance], &w, &hg)?;
            let mut s = Spectrum::new(
                format!("{class}_hapke{n:03}"),
                a.wavelengths.clone(),
                refl,
                Some(class.clone()),
            )?;
            s.geometry = Some(geometry);
            samples.push(s);
        }
    }
    SpectralLibrary::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_csv() -> &'static str {
        "# test library\nwavelength_nm,a:quartz,b:calcite@i30e0,c:quartz\n400,0.5,0.2,0.4\n410,0.6,0.25,0.45\n"
    }

    #[test]
    fn parses_three_samples_two_classes() {
        let lib = parse_library(tiny_csv(), Path::new("mem")).unwrap();
        assert_eq!(lib.len(), 3);
        assert_eq!(lib.n_classes(), 2);
        assert_eq!(lib.class_members("quartz"), &[0, 2]);
        assert_eq!(lib.samples()[1].geometry, Some(Geometry::new(30.0, 0.0)));
        assert_eq!(lib.samples()[2].reflectance, vec![0.4, 0.45]);
    }

    #[test]
    fn negative_reflectance_names_line() {
        let text = "wavelength_nm,a:x,b:y\n400,0.5,0.2\n410,-0.1,0.3\n";
        let err = parse_library(text, Path::new("lib.csv")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("-0.1"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_non_increasing_rows_fail() {
        let ragged = "wavelength_nm,a:x,b:y\n400,0.5\n";
        assert!(matches!(parse_library(ragged, Path::new("r")), Err(Error::Parse { line: 2, .. })));
        let backwards = "wavelength_nm,a:x\n410,0.5\n400,0.5\n";
        assert!(matches!(parse_library(backwards, Path::new("b")), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let lib = generate_synthetic_library(3, 4, 64, 11).unwrap();
        let text = library_to_csv(&lib, &["generated".into()]);
        let back = parse_library(&text, Path::new("mem")).unwrap();
        assert_eq!(lib, back);
    }

    #[test]
    fn synthetic_library_counts_and_determinism() {
        let a = generate_synthetic_library(8, 20, 256, 5).unwrap();
        let b = generate_synthetic_library(8, 20, 256, 5).unwrap();
        assert_eq!(a.len(), 160);
        assert_eq!(a.n_classes(), 8);
        assert_eq!(a, b);
        assert!(a
            .samples()
            .iter()
            .all(|s| s.reflectance.iter().all(|&r| (0.01..=1.0).contains(&r))));
        assert!(generate_synthetic_library(1, 20, 256, 5).is_err());
        assert!(generate_synthetic_library(3, 1, 256, 5).is_err());
        assert!(generate_synthetic_library(3, 2, 32, 5).is_err());
    }

    #[test]
    fn class_minima_follow_primary_bands() {
        // Render class means on a flat continuum so the deepest band decides
        // the minimum, then locate minima by scanning.
        let mut cfg = SyntheticLibraryConfig::new(2, 2, 256);
        let wl = cfg.wavelengths();
        let mut profiles = cfg.class_profiles(3);
        for p in &mut profiles {
            p.slope = 0.0;
            p.edge_depth = 0.0;
            p.bands.truncate(1);
        }
        cfg.depth_jitter = 0.0;
        let argmin = |v: &[f64]| {
            v.iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        let m0 = argmin(&cfg.render(&profiles[0], &wl, 1.0, 0.0, 1.0, 0.0));
        let m1 = argmin(&cfg.render(&profiles[1], &wl, 1.0, 0.0, 1.0, 0.0));
        assert_ne!(m0, m1);
        assert!((wl[m0] - profiles[0].bands[0].center_nm).abs() < 10.0);
        assert!((wl[m1] - profiles[1].bands[0].center_nm).abs() < 10.0);
    }

    fn class_of(points: Vec<Vec<f64>>, class: &str) -> Vec<Spectrum> {
        let wl: Vec<f64> = (0..points[0].len()).map(|i| 400.0 + i as f64).collect();
        points
            .into_iter()
            .enumerate()
            .map(|(i, p)| Spectrum::new(format!("{class}{i}"), wl.clone(), p, Some(class.into())).unwrap())
            .collect()
    }

    #[test]
    fn split_separates_duplicate_group_from_distant_group() {
        let mut pts = vec![vec![0.1, 0.1]; 4];
        pts.extend([vec![0.9, 0.8], vec![0.85, 0.9], vec![0.95, 0.95], vec![0.8, 0.85]]);
        let lib = SpectralLibrary::new(class_of(pts, "a")).unwrap();
        let (train, test) = split_train_test_kmeans(&lib, 0).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 4);
        // equal sizes: the group with lower mean index trains
        assert!(train.samples().iter().all(|s| s.reflectance == vec![0.1, 0.1]));
    }

    #[test]
    fn split_rejects_single_sample_class() {
        let mut samples = class_of(vec![vec![0.1, 0.2], vec![0.3, 0.2]], "a");
        samples.extend(class_of(vec![vec![0.5, 0.5]], "lonely"));
        let lib = SpectralLibrary::new(samples).unwrap();
        let err = split_train_test_kmeans(&lib, 0).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn equalize_counts_and_noop() {
        let lib = generate_synthetic_library(3, 4, 64, 2).unwrap();
        let small = lib.subset(&[0, 1, 4, 5, 6, 8, 9, 10, 11]).unwrap();
        let eq = equalize_classes_hapke(&small, 5, Geometry::LAB_DEFAULT, 9).unwrap();
        for c in eq.classes() {
            assert_eq!(eq.class_members(c).len(), 5);
        }
        // originals untouched and first
        assert_eq!(&eq.samples()[..small.len()], small.samples());
        let same = equalize_classes_hapke(&lib, 4, Geometry::LAB_DEFAULT, 9).unwrap();
        assert_eq!(same, lib);
        assert!(equalize_classes_hapke(&lib, 3, Geometry::LAB_DEFAULT, 9).is_err());
    }

    #[test]
    fn equalize_self_mix_reproduces_sample() {
        let lib = generate_synthetic_library(2, 2, 64, 4).unwrap();
        let one = lib.subset(&[0, 2, 3]).unwrap();
        let eq = equalize_classes_hapke(&one, 3, Geometry::LAB_DEFAULT, 1).unwrap();
        let orig = &one.samples()[0].reflectance;
        for &i in eq.class_members(one.label(0)).iter().skip(1) {
            let s = &eq.samples()[i].reflectance;
            assert!(s.iter().zip(orig).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }
}
