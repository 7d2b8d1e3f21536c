//! Synthetic mixed-pixel generation.
//!
//! With `e_i` the endmember reflectance vectors and `⊙` the elementwise
//! product:
//!
//! | model | observation |
//! |-------|-------------|
//! | LMM   | `Σ a_i e_i` |
//! | FM    | `Σ a_i e_i + Σ_{i<j} a_i a_j e_i⊙e_j` |
//! | GBM   | `Σ a_i e_i + Σ_{i<j} γ_ij a_i a_j e_i⊙e_j` |
//! | NM    | `Σ a_i e_i + Σ_{i<j} β_ij e_i⊙e_j`, `(a, β)` jointly on the simplex |
//! | SM    | `Σ_{i<j} β_ij e_i⊙e_j`, `β` on the simplex |
//! | PPNM  | `z + b z⊙z`, `z = Σ a_i e_i` |
//! | HM    | linear mixing of single-scattering albedos |

pub mod hapke;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::spectral::{Geometry, SpectralLibrary, Spectrum};
use hapke::HapkeGeometry;

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MixingModel {
    #[serde(rename = "LMM")]
    Lmm,
    #[serde(rename = "FM")]
    Fm,
    #[serde(rename = "NM")]
    Nm,
    #[serde(rename = "GBM")]
    Gbm,
    #[serde(rename = "PPNM")]
    Ppnm,
    #[serde(rename = "SM")]
    Sm,
    #[serde(rename = "HM")]
    Hm,
}

impl MixingModel {
    pub const ALL: [MixingModel; 7] = [
        MixingModel::Lmm,
        MixingModel::Gbm,
        MixingModel::Fm,
        MixingModel::Hm,
        MixingModel::Nm,
        MixingModel::Ppnm,
        MixingModel::Sm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixingModel::Lmm => "LMM",
            MixingModel::Fm => "FM",
            MixingModel::Nm => "NM",
            MixingModel::Gbm => "GBM",
            MixingModel::Ppnm => "PPNM",
            MixingModel::Sm => "SM",
            MixingModel::Hm => "HM",
        }
    }

    fn stream_tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for MixingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixingModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixingModel::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown mixing model `{s}`")))
    }
}

/// Mixing coefficients for one pixel. Unused fields stay empty / zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Coefficients {
    /// Linear abundances `a` (all zero for SM).
    pub abundances: Vec<f64>,
    /// Bilinear coefficients `β_ij` for NM and SM, pairs `i<j` in
    /// lexicographic order.
    pub pair_coeffs: Vec<f64>,
    /// GBM interaction strengths `γ_ij`, same pair order.
    pub gammas: Vec<f64>,
    /// PPNM post-nonlinearity strength.
    pub ppnm_b: f64,
}

/// Recipe for one synthetic mixed pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub model: MixingModel,
    pub endmember_refs: Vec<usize>,
    pub coeffs: Coefficients,
    /// Only used by HM.
    pub geometry: Option<HapkeGeometry>,
}

/// Additive Gaussian noise at a given signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

pub fn n_pairs(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

fn pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j)))
}

/// Uniform draw from the `n`-simplex, i.e. Dirichlet(1, …, 1).
pub fn sample_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Draws mixing coefficients for `model` with `m` endmembers.
pub fn sample_abundances(model: MixingModel, m: usize, rng: &mut Rng) -> Result<Coefficients> {
    if m < 1 {
        return Err(Error::invalid("at least one endmember is required"));
    }
    let p = n_pairs(m);
    let mut c = Coefficients::default();
    match model {
        MixingModel::Nm => {
            let joint = sample_simplex(rng, m + p);
            c.abundances = joint[..m].to_vec();
            c.pair_coeffs = joint[m..].to_vec();
        }
        MixingModel::Sm if m >= 2 => {
            c.abundances = vec![0.0; m];
            c.pair_coeffs = sample_simplex(rng, p);
        }
        _ => {
            c.abundances = sample_simplex(rng, m);
        }
    }
    match model {
        MixingModel::Gbm => c.gammas = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect(),
        MixingModel::Ppnm => c.ppnm_b = rng.gen_range(-3.0..3.0),
        _ => {}
    }
    Ok(c)
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::invalid(format!("{what} must be finite and nonnegative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sum to {s}, not 1")));
    }
    Ok(())
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.endmember_refs.len();
        let p = n_pairs(m);
        let c = &self.coeffs;
        if m == 0 {
            return Err(Error::invalid("mixture has no endmembers"));
        }
        if c.abundances.len() != m {
            return Err(Error::dim("abundances", m, c.abundances.len()));
        }
        let needs_pairs = matches!(self.model, MixingModel::Nm) || (self.model == MixingModel::Sm && m >= 2);
        if needs_pairs && c.pair_coeffs.len() != p {
            return Err(Error::dim("bilinear coefficients", p, c.pair_coeffs.len()));
        }
        match self.model {
            MixingModel::Nm => {
                let joint: Vec<f64> = c.abundances.iter().chain(&c.pair_coeffs).copied().collect();
                check_simplex(&joint, "NM linear and bilinear coefficients")
            }
            MixingModel::Sm if m >= 2 => {
                if c.abundances.iter().any(|&a| a != 0.0) {
                    return Err(Error::invalid("SM linear part must be zero"));
                }
                check_simplex(&c.pair_coeffs, "SM bilinear coefficients")
            }
            MixingModel::Gbm => {
                check_simplex(&c.abundances, "abundances")?;
                if c.gammas.len() != p {
                    return Err(Error::dim("GBM gammas", p, c.gammas.len()));
                }
                if c.gammas.iter().any(|g| !(0.0..=1.0).contains(g)) {
                    return Err(Error::invalid("GBM gammas must lie in [0, 1]"));
                }
                Ok(())
            }
            MixingModel::Ppnm => {
                check_simplex(&c.abundances, "abundances")?;
                if !c.ppnm_b.is_finite() {
                    return Err(Error::invalid("PPNM b must be finite"));
                }
                Ok(())
            }
            _ => check_simplex(&c.abundances, "abundances"),
        }
    }
}

fn linear(endmembers: &[&[f64]], a: &[f64], out: &mut [f64]) {
    for (e, &w) in endmembers.iter().zip(a) {
        for (o, v) in out.iter_mut().zip(e.iter()) {
            *o += w * v;
        }
    }
}

fn add_pairs(endmembers: &[&[f64]], weight: impl Fn(usize, usize, usize) -> f64, out: &mut [f64]) {
    for (k, (i, j)) in pairs(endmembers.len()).enumerate() {
        let w = weight(k, i, j);
        for (b, o) in out.iter_mut().enumerate() {
            *o += w * endmembers[i][b] * endmembers[j][b];
        }
    }
}

/// Mixes raw reflectance vectors according to `model` and `coeffs`.
pub fn mix_vectors(
    model: MixingModel,
    endmembers: &[&[f64]],
    coeffs: &Coefficients,
    geometry: Option<&HapkeGeometry>,
) -> Result<Vec<f64>> {
    let n = endmembers.first().map_or(0, |e| e.len());
    let a = &coeffs.abundances;
    let mut y = vec![0.0; n];
    match model {
        MixingModel::Lmm => linear(endmembers, a, &mut y),
        MixingModel::Fm => {
            linear(endmembers, a, &mut y);
            add_pairs(endmembers, |_, i, j| a[i] * a[j], &mut y);
        }
        MixingModel::Gbm => {
            linear(endmembers, a, &mut y);
            add_pairs(endmembers, |k, i, j| coeffs.gammas[k] * a[i] * a[j], &mut y);
        }
        MixingModel::Nm => {
            linear(endmembers, a, &mut y);
            add_pairs(endmembers, |k, _, _| coeffs.pair_coeffs[k], &mut y);
        }
        MixingModel::Sm => {
            if endmembers.len() < 2 {
                linear(endmembers, a, &mut y);
            } else {
                add_pairs(endmembers, |k, _, _| coeffs.pair_coeffs[k], &mut y);
            }
        }
        MixingModel::Ppnm => {
            linear(endmembers, a, &mut y);
            y.iter_mut().for_each(|z| *z += coeffs.ppnm_b * *z * *z);
        }
        MixingModel::Hm => {
            let g = geometry.copied().unwrap_or_else(default_hapke_geometry);
            y = hapke::mix_reflectance(endmembers, a, &g)?;
        }
    }
    Ok(y)
}

pub fn default_hapke_geometry() -> HapkeGeometry {
    HapkeGeometry::from_degrees(Geometry::LAB_DEFAULT.incidence_deg, Geometry::LAB_DEFAULT.emission_deg)
        .expect("default geometry is valid")
}

/// Mixes the library samples referenced by `spec`.
pub fn mix(spec: &MixtureSpec, lib: &SpectralLibrary) -> Result<Spectrum> {
    spec.validate()?;
    let mut endmembers = Vec::with_capacity(spec.endmember_refs.len());
    for &r in &spec.endmember_refs {
        let s = lib
            .samples()
            .get(r)
            .ok_or_else(|| Error::invalid(format!("endmember reference {r} out of range")))?;
        endmembers.push(s.reflectance.as_slice());
    }
    let y = mix_vectors(spec.model, &endmembers, &spec.coeffs, spec.geometry.as_ref())?;
    Spectrum::observed("mixture", lib.wavelengths().to_vec(), y)
}

/// Noise variance `yᵀy / (10^(SNR/10) L)`.
pub fn noise_variance(y: &[f64], snr_db: f64) -> f64 {
    let energy: f64 = y.iter().map(|v| v * v).sum();
    energy / (10f64.powf(snr_db / 10.0) * y.len() as f64)
}

pub fn add_noise_with(y: &Spectrum, snr_db: f64, rng: &mut Rng) -> Spectrum {
    let sigma = noise_variance(&y.reflectance, snr_db).sqrt();
    let reflectance = y
        .reflectance
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Spectrum { reflectance, ..y.clone() }
}

/// Adds iid zero-mean Gaussian noise at `spec.snr_db`.
pub fn add_noise(y: &Spectrum, spec: &NoiseSpec) -> Spectrum {
    add_noise_with(y, spec.snr_db, &mut rng::from_seed(spec.seed))
}

/// One generated mixed pixel with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPixel {
    pub id: String,
    pub spectrum: Spectrum,
    pub true_classes: Vec<String>,
    pub spec: MixtureSpec,
}

/// Parameters of a mixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSetParams {
    pub model: MixingModel,
    pub n_endmembers: usize,
    pub n_combos: usize,
    pub n_weights: usize,
    pub noise: NoiseSpec,
    pub geometry: Geometry,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Random distinct `m`-subsets of `0..n`, each sorted.
fn random_combinations(n: usize, m: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        let mut c = pool[..m].to_vec();
        c.sort_unstable();
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Class combinations and one endmember sample per class, shared by every
/// mixing model generated with the same seed.
pub fn draw_endmember_sets(
    test_lib: &SpectralLibrary,
    m: usize,
    n_combos: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let nc = test_lib.n_classes();
    if m < 1 {
        return Err(Error::invalid("at least one endmember is required"));
    }
    if nc < m {
        return Err(Error::invalid(format!(
            "library has {nc} classes, fewer than the {m} endmembers requested"
        )));
    }
    if (n_combos as f64) > binomial(nc, m) {
        return Err(Error::invalid(format!(
            "{n_combos} distinct combinations requested but only {} exist",
            binomial(nc, m)
        )));
    }
    let combos = random_combinations(nc, m, n_combos, &mut rng::stream(seed, rng::task_id(10, 0, 0)));
    Ok(combos
        .iter()
        .enumerate()
        .map(|(ci, combo)| {
            let mut r = rng::stream(seed, rng::task_id(11, ci as u64, 0));
            combo
                .iter()
                .map(|&c| {
                    let members = test_lib.class_members(&test_lib.classes()[c]);
                    members[r.gen_range(0..members.len())]
                })
                .collect()
        })
        .collect())
}

/// Generates `n_combos × n_weights` noisy mixtures from `test_lib`.
pub fn generate_mixture_set(test_lib: &SpectralLibrary, params: &MixtureSetParams, seed: u64) -> Result<Vec<MixedPixel>> {
    let sets = draw_endmember_sets(test_lib, params.n_endmembers, params.n_combos, seed)?;
    let geometry = match params.model {
        MixingModel::Hm => Some(HapkeGeometry::from_degrees(
            params.geometry.incidence_deg,
            params.geometry.emission_deg,
        )?),
        _ => None,
    };
    let tag = params.model.stream_tag();
    let tasks: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|c| (0..params.n_weights).map(move |w| (c, w)))
        .collect();
    tasks
        .par_iter()
        .map(|&(c, w)| {
            let refs = &sets[c];
            let mut coeff_rng = rng::stream(seed, rng::task_id(100 + tag, c as u64, w as u64));
            let coeffs = sample_abundances(params.model, refs.len(), &mut coeff_rng)?;
            let spec = MixtureSpec {
                model: params.model,
                endmember_refs: refs.clone(),
                coeffs,
                geometry,
            };
            let clean = mix(&spec, test_lib)?;
            let mut noise_rng = rng::stream(params.noise.seed, rng::task_id(200 + tag, c as u64, w as u64));
            let mut spectrum = add_noise_with(&clean, params.noise.snr_db, &mut noise_rng);
            let id = format!("{}_{c:03}_{w:04}", params.model);
            spectrum.id = id.clone();
            let true_classes = refs.iter().map(|&r| test_lib.label(r).to_string()).collect();
            Ok(MixedPixel {
                id,
                spectrum,
                true_classes,
                spec,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ems() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.2, 0.5, 0.9], vec![0.7, 0.3, 0.4], vec![0.1, 0.8, 0.6])
    }

    fn coeffs(a: &[f64]) -> Coefficients {
        Coefficients {
            abundances: a.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn one_endmember_lmm_is_unit_abundance() {
        let c = sample_abundances(MixingModel::Lmm, 1, &mut rng::from_seed(0)).unwrap();
        assert_eq!(c.abundances, vec![1.0]);
        assert!(sample_abundances(MixingModel::Lmm, 0, &mut rng::from_seed(0)).is_err());
    }

    #[test]
    fn dirichlet_mean_is_uniform() {
        let mut r = rng::from_seed(42);
        let mut mean = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let a = sample_simplex(&mut r, 3);
            for (m, v) in mean.iter_mut().zip(&a) {
                *m += v / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{mean:?}");
        }
    }

    #[test]
    fn ppnm_b_range_and_mean() {
        let mut r = rng::from_seed(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let b = sample_abundances(MixingModel::Ppnm, 2, &mut r).unwrap().ppnm_b;
            assert!(b > -3.0 && b < 3.0);
            sum += b;
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn nm_and_sm_coefficients_live_on_simplex() {
        let mut r = rng::from_seed(1);
        let nm = sample_abundances(MixingModel::Nm, 3, &mut r).unwrap();
        assert_eq!(nm.pair_coeffs.len(), 3);
        let total: f64 = nm.abundances.iter().chain(&nm.pair_coeffs).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let sm = sample_abundances(MixingModel::Sm, 3, &mut r).unwrap();
        assert!(sm.abundances.iter().all(|&a| a == 0.0));
        assert!((sm.pair_coeffs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fan_model_two_endmembers() {
        let (e1, e2, _) = ems();
        let y = mix_vectors(MixingModel::Fm, &[&e1, &e2], &coeffs(&[0.5, 0.5]), None).unwrap();
        for b in 0..3 {
            let expect = 0.5 * e1[b] + 0.5 * e2[b] + 0.25 * e1[b] * e2[b];
            assert!((y[b] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn single_endmember_reductions() {
        let (e1, _, _) = ems();
        for model in [MixingModel::Fm, MixingModel::Gbm, MixingModel::Nm, MixingModel::Sm, MixingModel::Lmm] {
            let c = sample_abundances(model, 1, &mut rng::from_seed(3)).unwrap();
            let y = mix_vectors(model, &[&e1], &c, None).unwrap();
            assert_eq!(y, e1, "{model}");
        }
        let mut c = coeffs(&[1.0]);
        c.ppnm_b = 0.7;
        let y = mix_vectors(MixingModel::Ppnm, &[&e1], &c, None).unwrap();
        for b in 0..3 {
            assert!((y[b] - (e1[b] + 0.7 * e1[b] * e1[b])).abs() < 1e-15);
        }
    }

    #[test]
    fn ppnm_may_go_negative_unclipped() {
        let (e1, e2, _) = ems();
        let mut c = coeffs(&[0.2, 0.8]);
        c.ppnm_b = -2.9;
        let y = mix_vectors(MixingModel::Ppnm, &[&e1, &e2], &c, None).unwrap();
        assert!(y.iter().any(|v| *v < 0.0));
    }

    #[test]
    fn spec_validation_catches_mismatch() {
        let spec = MixtureSpec {
            model: MixingModel::Gbm,
            endmember_refs: vec![0, 1],
            coeffs: coeffs(&[0.5, 0.5]),
            geometry: None,
        };
        assert!(spec.validate().is_err());
        let bad_sum = MixtureSpec {
            model: MixingModel::Lmm,
            endmember_refs: vec![0, 1],
            coeffs: coeffs(&[0.5, 0.6]),
            geometry: None,
        };
        assert!(bad_sum.validate().is_err());
    }

    #[test]
    fn noise_variance_formula() {
        let y = vec![1.0; 200];
        assert!((noise_variance(&y, 50.0) - 1e-5).abs() < 1e-18);
        let s = Spectrum::observed("y", (0..200).map(f64::from).collect(), vec![0.4; 200]).unwrap();
        let quiet = add_noise(&s, &NoiseSpec { snr_db: 300.0, seed: 1 });
        assert!(quiet.reflectance.iter().all(|v| (v - 0.4).abs() < 1e-10));
    }

    #[test]
    fn mixture_set_counts_and_determinism() {
        let lib = crate::spectral::generate_synthetic_library(4, 3, 64, 8).unwrap();
        let params = MixtureSetParams {
            model: MixingModel::Gbm,
            n_endmembers: 2,
            n_combos: 2,
            n_weights: 3,
            noise: NoiseSpec { snr_db: 50.0, seed: 2 },
            geometry: Geometry::LAB_DEFAULT,
        };
        let a = generate_mixture_set(&lib, &params, 9).unwrap();
        let b = generate_mixture_set(&lib, &params, 9).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.true_classes.len(), 2);
            assert_ne!(p.true_classes[0], p.true_classes[1]);
        }
        let too_many = MixtureSetParams { n_endmembers: 5, ..params.clone() };
        assert!(generate_mixture_set(&lib, &too_many, 9).is_err());
        let too_many_combos = MixtureSetParams { n_combos: 7, ..params };
        assert!(generate_mixture_set(&lib, &too_many_combos, 9).is_err());
    }
}
