//! Simplified Hapke model: porosity 1, isotropic phase function, no
//! opposition effect. Intimate mixtures are linear in single-scattering
//! albedo (SSA).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bisection bracket for SSA inversion.
pub const SSA_BRACKET: (f64, f64) = (1e-9, 1.0 - 1e-9);
/// Reflectance values are clipped into this range before inversion.
pub const REFLECTANCE_CLIP: (f64, f64) = (1e-6, 1.0 - 1e-6);
pub const MAX_BISECTION_ITERS: usize = 60;
const ROUND_TRIP_TOL: f64 = 1e-12;

/// Cosines of the incidence and emission angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapkeGeometry {
    pub mu0: f64,
    pub mu: f64,
}

impl HapkeGeometry {
    pub fn new(mu0: f64, mu: f64) -> Result<Self> {
        let ok = |c: f64| c > 0.0 && c <= 1.0 + 1e-15;
        if !ok(mu0) || !ok(mu) {
            return Err(Error::invalid(format!(
                "Hapke geometry cosines must lie in (0, 1], got mu0={mu0}, mu={mu}"
            )));
        }
        Ok(Self {
            mu0: mu0.min(1.0),
            mu: mu.min(1.0),
        })
    }

    pub fn from_degrees(incidence_deg: f64, emission_deg: f64) -> Result<Self> {
        Self::new(incidence_deg.to_radians().cos(), emission_deg.to_radians().cos())
    }

    pub fn normal() -> Self {
        Self { mu0: 1.0, mu: 1.0 }
    }
}

/// Isotropic-scattering approximation of Chandrasekhar's H-function.
pub fn h_function(x: f64, w: f64) -> f64 {
    (1.0 + 2.0 * x) / (1.0 + 2.0 * x * (1.0 - w).sqrt())
}

fn reff(w: f64, g: &HapkeGeometry) -> f64 {
    w / 4.0 / (g.mu0 + g.mu) * h_function(g.mu0, w) * h_function(g.mu, w)
}

/// Bidirectional reflectance factor for albedo `w` in `[0, 1)`.
pub fn ssa_to_reflectance(w: f64, g: &HapkeGeometry) -> Result<f64> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::invalid(format!("single-scattering albedo {w} outside [0, 1)")));
    }
    Ok(reff(w, g))
}

/// Result of an SSA inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaInversion {
    pub ssa: f64,
    pub iterations: usize,
}

/// Inverts [`ssa_to_reflectance`] by bisection; the forward model is
/// strictly increasing in `w`.
pub fn reflectance_to_ssa(r: f64, g: &HapkeGeometry) -> Result<SsaInversion> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Inversion(format!("reflectance {r} outside (0, 1)")));
    }
    let (mut lo, mut hi) = SSA_BRACKET;
    let (r_lo, r_hi) = (reff(lo, g), reff(hi, g));
    if r < r_lo || r > r_hi {
        return Err(Error::Inversion(format!(
            "reflectance {r} not reachable for geometry mu0={}, mu={} (range [{r_lo:.3e}, {r_hi:.6}])",
            g.mu0, g.mu
        )));
    }
    let mut mid = 0.5 * (lo + hi);
    for it in 1..=MAX_BISECTION_ITERS {
        mid = 0.5 * (lo + hi);
        let f = reff(mid, g);
        if (f - r).abs() <= ROUND_TRIP_TOL {
            return Ok(SsaInversion { ssa: mid, iterations: it });
        }
        if f < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SsaInversion {
        ssa: mid,
        iterations: MAX_BISECTION_ITERS,
    })
}

/// Mixes reflectance vectors in SSA space with the given weights.
pub fn mix_reflectance(endmembers: &[&[f64]], weights: &[f64], g: &HapkeGeometry) -> Result<Vec<f64>> {
    if endmembers.len() != weights.len() {
        return Err(Error::dim("Hapke mixture weights", endmembers.len(), weights.len()));
    }
    let n = endmembers.first().map_or(0, |e| e.len());
    let (clip_lo, clip_hi) = REFLECTANCE_CLIP;
    (0..n)
        .map(|b| {
            let mut w_mix = 0.0;
            for (e, &a) in endmembers.iter().zip(weights) {
                let r = e[b].clamp(clip_lo, clip_hi);
                w_mix += a * reflectance_to_ssa(r, g)?.ssa;
            }
            ssa_to_reflectance(w_mix.min(SSA_BRACKET.1), g)
        })
        .collect()
}
