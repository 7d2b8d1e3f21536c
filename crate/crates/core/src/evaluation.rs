//! Detection metrics, ROC meshes, and the nonlinearity score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::nnls;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, truth: bool, detected: bool) {
        match (truth, detected) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// `(recall, false alarm rate)`.
pub fn recall_far(c: &ConfusionCounts) -> Result<(f64, f64)> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::invalid("recall undefined: no positive pairs"));
    }
    if c.fp + c.tn == 0 {
        return Err(Error::invalid("false alarm rate undefined: no negative pairs"));
    }
    Ok((
        c.tp as f64 / (c.tp + c.fn_) as f64,
        c.fp as f64 / (c.fp + c.tn) as f64,
    ))
}

/// Class membership flags of one pixel, in bank class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelClasses {
    pub id: String,
    pub classes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub aggregate: ConfusionCounts,
    pub per_class: Vec<ConfusionCounts>,
}

/// Tallies every (pixel, class) pair. With `exclude_unknown`, pixels where
/// nothing was detected contribute only to the positive counts.
pub fn build_confusion(truth: &[PixelClasses], detected: &[PixelClasses], exclude_unknown: bool) -> Result<ConfusionTable> {
    if truth.len() != detected.len() {
        return Err(Error::dim("decision rows", truth.len(), detected.len()));
    }
    let n_classes = truth.first().map_or(0, |p| p.classes.len());
    let mut per_class = vec![ConfusionCounts::default(); n_classes];
    for (t, d) in truth.iter().zip(detected) {
        if t.id != d.id {
            return Err(Error::invalid(format!("pixel id mismatch: truth `{}` vs decision `{}`", t.id, d.id)));
        }
        if t.classes.len() != n_classes || d.classes.len() != n_classes {
            return Err(Error::dim(
                format!("class flags of pixel {}", t.id),
                n_classes,
                t.classes.len().max(d.classes.len()),
            ));
        }
        let unknown = !d.classes.iter().any(|&x| x);
        for (c, counts) in per_class.iter_mut().enumerate() {
            if exclude_unknown && unknown && !t.classes[c] {
                continue;
            }
            counts.add(t.classes[c], d.classes[c]);
        }
    }
    let mut aggregate = ConfusionCounts::default();
    per_class.iter().for_each(|c| aggregate.merge(c));
    Ok(ConfusionTable { aggregate, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Parameter assignment, e.g. `[("k", 4.0), ("K", 12.0)]`.
    pub params: Vec<(String, f64)>,
    pub recall: f64,
    pub far: f64,
}

impl RocPoint {
    pub fn distance(&self) -> f64 {
        ((1.0 - self.recall).powi(2) + self.far.powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RocMesh {
    pub points: Vec<RocPoint>,
}

impl RocMesh {
    /// Closest point to the ideal corner; the first one on ties.
    pub fn best(&self) -> Option<&RocPoint> {
        self.points
            .iter()
            .reduce(|best, p| if p.distance() < best.distance() { p } else { best })
    }
}

/// Builds a mesh from one confusion table per parameter assignment.
pub fn roc_mesh(runs: impl IntoIterator<Item = (Vec<(String, f64)>, ConfusionCounts)>) -> Result<RocMesh> {
    let points = runs
        .into_iter()
        .map(|(params, c)| {
            let (recall, far) = recall_far(&c)?;
            Ok(RocPoint { params, recall, far })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RocMesh { points })
}

/// `min √((1 − R)² + FAR²)` over the mesh.
pub fn d_roc(mesh: &RocMesh) -> Result<f64> {
    mesh.best()
        .map(RocPoint::distance)
        .ok_or_else(|| Error::invalid("d_ROC of an empty mesh"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsValue {
    pub degrees: f64,
    /// Set when the best nonnegative fit is zero; `degrees` is then 90.
    pub degenerate: bool,
}

/// Angle between `y` and its nonnegative least-squares fit by the columns of
/// `w`, in degrees.
pub fn nonlinearity_score(y: &[f64], w: &DMatrix<f64>) -> Result<NsValue> {
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(ny > 0.0) {
        return Err(Error::invalid("nonlinearity score of a zero spectrum"));
    }
    let a = nnls(w, y)?;
    let fit = w * nalgebra::DVector::from_column_slice(&a);
    let nf = fit.norm();
    if nf == 0.0 {
        return Ok(NsValue {
            degrees: 90.0,
            degenerate: true,
        });
    }
    let dot: f64 = y.iter().zip(fit.iter()).map(|(a, b)| a * b).sum();
    Ok(NsValue {
        degrees: (dot / (ny * nf)).clamp(-1.0, 1.0).acos().to_degrees(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsRecord {
    pub pixel_id: String,
    pub ns_deg: f64,
    pub degenerate: bool,
    /// Identifies the endmember matrix, e.g. the joined true class names.
    pub endmembers: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsBin {
    pub lo: f64,
    pub hi: f64,
    pub pixel_ids: Vec<String>,
}

/// Groups records into `[e_i, e_{i+1})` bins plus a final `[e_last, 180]`.
/// Records below the first edge fall in no bin.
pub fn bin_by_ns(records: &[NsRecord], edges: &[f64]) -> Result<Vec<NsBin>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[1] <= w[0]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("NS bin edges must be non-empty and strictly increasing"));
    }
    let mut bins: Vec<NsBin> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| NsBin {
            lo,
            hi: edges.get(i + 1).copied().unwrap_or(180.0),
            pixel_ids: Vec::new(),
        })
        .collect();
    for r in records {
        if r.ns_deg < edges[0] {
            continue;
        }
        let i = edges.partition_point(|&e| e <= r.ns_deg) - 1;
        bins[i].pixel_ids.push(r.pixel_id.clone());
    }
    Ok(bins)
}
