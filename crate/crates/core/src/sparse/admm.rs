//! ADMM solvers for nonnegative ℓ1 (SUnSAL) and row-ℓ2,1 (CLSUnSAL)
//! regularised unmixing, without the sum-to-one constraint.
//!
//! Both problems share the splitting `a = z`, with
//! `a ← (MᵀM + ρI)⁻¹ (Mᵀy + ρ(z + d))`, `z ← prox(a − d)`, `d ← d − (a − z)`.
//! Columns of a batch are solved together as one matrix iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            rho: 1.0,
            max_iters: 1000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
        }
    }
}

impl AdmmConfig {
    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.rho > 0.0) || !(self.tol_primal > 0.0) || !(self.tol_dual > 0.0) {
            return Err(Error::invalid("rho and ADMM tolerances must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Solver output for a batch; `abundances` is `N_lib × n_pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    pub abundances: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl UnmixResult {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.abundances.column(j).iter().copied().collect()
    }
}

/// A library matrix with the cached inverse `(MᵀM + ρI)⁻¹`.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    m: DMatrix<f64>,
    rho: f64,
    inverse: DMatrix<f64>,
}

impl AdmmSolver {
    pub fn new(m: DMatrix<f64>, rho: f64) -> Result<Self> {
        if m.ncols() == 0 || m.nrows() == 0 {
            return Err(Error::invalid("library matrix is empty"));
        }
        if !(rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        let n = m.ncols();
        let gram = m.tr_mul(&m) + DMatrix::identity(n, n) * rho;
        let inverse = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("MᵀM + ρI is not positive definite"))?
            .inverse();
        Ok(Self { m, rho, inverse })
    }

    pub fn library(&self) -> &DMatrix<f64> {
        &self.m
    }

    fn check(&self, y: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.rho != self.rho {
            return Err(Error::invalid(format!(
                "solver was factorised for rho = {}, config asks for {}",
                self.rho, cfg.rho
            )));
        }
        if y.nrows() != self.m.nrows() {
            return Err(Error::dim("spectrum bands", self.m.nrows(), y.nrows()));
        }
        if y.ncols() == 0 {
            return Err(Error::invalid("batch has no spectra"));
        }
        Ok(())
    }

    fn run(&self, y: &DMatrix<f64>, cfg: &AdmmConfig, prox: impl Fn(&mut DMatrix<f64>)) -> UnmixResult {
        let rho = self.rho;
        let mty = self.m.tr_mul(y);
        let base = &self.inverse * &mty;
        let mut z = base.map(|v| v.max(0.0));
        let mut d = DMatrix::zeros(z.nrows(), z.ncols());
        let scale = (z.len() as f64).sqrt();
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=cfg.max_iters {
            iterations = it;
            let a = &base + (&self.inverse * (&z + &d)) * rho;
            let mut z_new = &a - &d;
            prox(&mut z_new);
            d -= &a - &z_new;
            let primal = (&a - &z_new).norm();
            let dual = rho * (&z_new - &z).norm();
            z = z_new;
            if primal <= cfg.tol_primal * scale && dual <= cfg.tol_dual * scale {
                converged = true;
                break;
            }
        }
        UnmixResult {
            abundances: z,
            converged,
            iterations,
        }
    }

    /// Nonnegative ℓ1-regularised unmixing of every column of `y`.
    pub fn sunsal(&self, y: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<UnmixResult> {
        self.check(y, cfg)?;
        let t = cfg.lambda / self.rho;
        let mut out = self.run(y, cfg, |z| z.apply(|v| *v = (*v - t).max(0.0)));
        // Columns where λ dominates every positive correlation have the
        // exact solution 0.
        let mty = self.m.tr_mul(y);
        for j in 0..y.ncols() {
            if mty.column(j).iter().all(|&v| v <= cfg.lambda) {
                out.abundances.column_mut(j).fill(0.0);
            }
        }
        Ok(out)
    }

    /// Nonnegative row-group-sparse unmixing of the batch `y` jointly.
    pub fn clsunsal(&self, y: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<UnmixResult> {
        self.check(y, cfg)?;
        let t = cfg.lambda / self.rho;
        let mut out = self.run(y, cfg, |z| {
            // prox of ℓ2,1 + nonnegativity: project, then shrink each row
            z.apply(|v| *v = v.max(0.0));
            for mut row in z.row_iter_mut() {
                let norm = row.norm();
                let factor = if norm > 0.0 { (1.0 - t / norm).max(0.0) } else { 0.0 };
                row *= factor;
            }
        });
        let mty = self.m.tr_mul(y).map(|v| v.max(0.0));
        if (0..mty.nrows()).all(|i| mty.row(i).norm() <= cfg.lambda) {
            out.abundances.fill(0.0);
        }
        Ok(out)
    }
}

/// Half the squared residual plus `λ‖a‖₁`.
pub fn sunsal_objective(m: &DMatrix<f64>, y: &[f64], a: &[f64], lambda: f64) -> f64 {
    let a = DMatrix::from_column_slice(a.len(), 1, a);
    let y = DMatrix::from_column_slice(y.len(), 1, y);
    0.5 * (m * &a - y).norm_squared() + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sparse::nnls;
    use rand::Rng as _;

    fn random_instance(seed: u64, rows: usize, cols: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut r = rng::from_seed(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| r.gen::<f64>());
        let y = (0..rows).map(|_| r.gen::<f64>()).collect();
        (m, y)
    }

    fn tight() -> AdmmConfig {
        AdmmConfig {
            max_iters: 20_000,
            tol_primal: 1e-10,
            tol_dual: 1e-10,
            ..AdmmConfig::default()
        }
    }

    #[test]
    fn lambda_zero_matches_nnls() {
        for seed in 0..5 {
            let (m, y) = random_instance(seed, 30, 6);
            let solver = AdmmSolver::new(m.clone(), 1.0).unwrap();
            let yb = DMatrix::from_column_slice(30, 1, &y);
            let res = solver.sunsal(&yb, &tight()).unwrap();
            let a = res.column(0);
            let reference = nnls(&m, &y).unwrap();
            let diff = sunsal_objective(&m, &y, &a, 0.0) - sunsal_objective(&m, &y, &reference, 0.0);
            assert!(diff.abs() < 1e-6, "seed {seed}: {diff}");
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn dominant_lambda_gives_exact_zero() {
        let (m, y) = random_instance(7, 20, 5);
        let solver = AdmmSolver::new(m.clone(), 1.0).unwrap();
        let yb = DMatrix::from_column_slice(20, 1, &y);
        let lmax = m.tr_mul(&yb).amax();
        let res = solver.sunsal(&yb, &AdmmConfig::default().with_lambda(lmax)).unwrap();
        assert!(res.abundances.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_column_clsunsal_matches_sunsal() {
        let (m, y) = random_instance(9, 25, 5);
        let solver = AdmmSolver::new(m, 1.0).unwrap();
        let yb = DMatrix::from_column_slice(25, 1, &y);
        let cfg = tight().with_lambda(0.05);
        let a = solver.sunsal(&yb, &cfg).unwrap();
        let b = solver.clsunsal(&yb, &cfg).unwrap();
        assert!((a.abundances - b.abundances).amax() < 1e-6);
    }

    #[test]
    fn sparse_support_recovered() {
        let mut r = rng::from_seed(21);
        let m = DMatrix::from_fn(60, 8, |_, _| r.gen::<f64>());
        let mut truth = vec![0.0; 8];
        truth[1] = 0.6;
        truth[5] = 0.4;
        let y = &m * DMatrix::from_column_slice(8, 1, &truth);
        let solver = AdmmSolver::new(m, 1.0).unwrap();
        let a = solver.sunsal(&y, &tight().with_lambda(1e-4)).unwrap().column(0);
        let support: Vec<usize> = (0..8).filter(|&i| a[i] > 0.05).collect();
        assert_eq!(support, vec![1, 5]);
    }

    #[test]
    fn shared_support_rows_dominate() {
        let mut r = rng::from_seed(5);
        let m = DMatrix::from_fn(40, 10, |_, _| r.gen::<f64>());
        let mut a = DMatrix::zeros(10, 6);
        for j in 0..6 {
            a[(2, j)] = r.gen_range(0.2..0.8);
            a[(7, j)] = r.gen_range(0.2..0.8);
        }
        let y = &m * &a;
        let solver = AdmmSolver::new(m, 1.0).unwrap();
        let res = solver.clsunsal(&y, &tight().with_lambda(1e-3)).unwrap();
        let norms: Vec<f64> = (0..10).map(|i| res.abundances.row(i).norm()).collect();
        let inside = norms[2].min(norms[7]);
        assert!((0..10).filter(|i| *i != 2 && *i != 7).all(|i| norms[i] < inside));
    }

    #[test]
    fn rejects_bad_config() {
        let (m, y) = random_instance(1, 5, 2);
        let solver = AdmmSolver::new(m, 1.0).unwrap();
        let yb = DMatrix::from_column_slice(5, 1, &y);
        assert!(solver.sunsal(&yb, &AdmmConfig::default().with_lambda(-1.0)).is_err());
        let other_rho = AdmmConfig {
            rho: 2.0,
            ..AdmmConfig::default()
        };
        assert!(solver.sunsal(&yb, &other_rho).is_err());
    }
}
