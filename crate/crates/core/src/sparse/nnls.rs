//! Lawson–Hanson active-set nonnegative least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `argmin ‖y − W a‖₂` subject to `a ⪰ 0`.
pub fn nnls(w: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (n_rows, n_cols) = w.shape();
    if y.len() != n_rows {
        return Err(Error::dim("nnls signal length", n_rows, y.len()));
    }
    if n_cols == 0 {
        return Err(Error::invalid("nnls needs at least one column"));
    }
    if let Some(j) = (0..n_cols).find(|&j| w.column(j).iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid(format!("nnls column {j} is identically zero")));
    }
    if y.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("nnls inputs must be finite"));
    }
    let y = DVector::from_column_slice(y);
    let wty = w.tr_mul(&y);
    let scale = wty.amax();
    let mut a = DVector::zeros(n_cols);
    if scale == 0.0 {
        return Ok(a.as_slice().to_vec());
    }
    let tol = 1e-12 * scale;
    let mut passive = vec![false; n_cols];
    let gradient = |a: &DVector<f64>| &wty - w.tr_mul(&(w * a));
    let mut g = gradient(&a);
    let max_outer = 3 * n_cols + 10;
    for _ in 0..max_outer {
        let next = (0..n_cols)
            .filter(|&j| !passive[j] && g[j] > tol)
            .max_by(|&i, &j| g[i].total_cmp(&g[j]).then(j.cmp(&i)));
        let Some(j) = next else { break };
        passive[j] = true;
        loop {
            let s = solve_passive(w, &y, &passive);
            let blocking: Vec<usize> = (0..n_cols).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if blocking.is_empty() {
                a = s;
                break;
            }
            let step = blocking
                .iter()
                .map(|&i| a[i] / (a[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            a += (&s - &a) * step;
            for i in 0..n_cols {
                if passive[i] && (a[i] <= 0.0 || blocking.contains(&i) && a[i] <= tol) {
                    passive[i] = false;
                    a[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        g = gradient(&a);
    }
    Ok(a.iter().map(|&v| v.max(0.0)).collect())
}

/// Unconstrained least squares on the passive columns; zero elsewhere.
fn solve_passive(w: &DMatrix<f64>, y: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let sub = w.select_columns(&idx);
    let qr = sub.clone().qr();
    let qty = qr.q().tr_mul(y);
    let r = qr.r();
    let mut out = DVector::zeros(passive.len());
    let sol = r.solve_upper_triangular(&qty).unwrap_or_else(|| {
        // rank-deficient subset: fall back to the pseudo-inverse
        sub.clone()
            .pseudo_inverse(1e-12)
            .map(|p| p * y)
            .unwrap_or_else(|_| DVector::zeros(idx.len()))
    });
    for (k, &i) in idx.iter().enumerate() {
        out[i] = sol[k];
    }
    out
}

/// Max KKT violation of `a` relative to `‖Wᵀy‖∞`.
pub fn kkt_violation(w: &DMatrix<f64>, y: &[f64], a: &[f64]) -> f64 {
    let y = DVector::from_column_slice(y);
    let a = DVector::from_column_slice(a);
    let scale = w.tr_mul(&y).amax().max(f64::MIN_POSITIVE);
    let g = w.tr_mul(&(w * &a - &y));
    (0..a.len())
        .map(|i| if a[i] > 0.0 { g[i].abs() } else { (-g[i]).max(0.0) })
        .fold(0.0, f64::max)
        / scale
}
