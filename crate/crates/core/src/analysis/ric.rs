use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::projection::{binomial, for_each_subset};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Largest number of supports examined by the exhaustive estimate.
pub const RIC_BUDGET: u64 = 1_000_000;

/// Restricted isometry constant for one sparsity level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RicLevel {
    pub s: usize,
    pub delta: f64,
    /// Extreme eigenvalues of the restricted normal matrices.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub supports: u64,
    /// Fraction of all `C(l, s)` supports that were examined.
    pub coverage: f64,
}

/// `delta_k`, `delta_2k`, `delta_3k` and the RIP condition
/// `delta_k + delta_2k + delta_3k < 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RicReport {
    pub k: usize,
    pub levels: Vec<RicLevel>,
    pub rip_satisfied: bool,
}

impl RicReport {
    pub fn delta_k(&self) -> f64 {
        self.levels[0].delta
    }
}

/// `H` (`m x n`, row-major) together with the transform `Phi` (`l x n`).
#[derive(Clone, Debug)]
pub struct RicProblem {
    gram: DMatrix<f64>,
    phi: DMatrix<f64>,
}

impl RicProblem {
    pub fn new(h: &[f64], m: usize, phi: &[f64], l: usize, n: usize) -> Result<Self> {
        if h.len() != m * n || phi.len() != l * n {
            return Err(Error::config(format!(
                "ric: H has {} entries for {m}x{n}, Phi has {} for {l}x{n}",
                h.len(),
                phi.len()
            )));
        }
        let hm = DMatrix::from_row_slice(m, n, h);
        Ok(RicProblem {
            gram: hm.transpose() * hm,
            phi: DMatrix::from_row_slice(l, n, phi),
        })
    }

    /// `Phi = I`.
    pub fn canonical(h: &[f64], m: usize, n: usize) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(n, n);
        Self::new(h, m, eye.transpose().as_slice(), n, n)
    }

    pub fn transform_dim(&self) -> usize {
        self.phi.nrows()
    }

    /// Orthonormal basis of `{v : (Phi v)_i = 0 for i outside support}`.
    pub fn support_basis(&self, support: &[usize]) -> DMatrix<f64> {
        let n = self.phi.ncols();
        let rest: Vec<usize> = (0..self.phi.nrows()).filter(|i| !support.contains(i)).collect();
        if rest.is_empty() {
            return DMatrix::identity(n, n);
        }
        let sub = self.phi.select_rows(&rest);
        let eig = SymmetricEigen::new(sub.transpose() * sub);
        let scale = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1.0);
        let cols: Vec<usize> = (0..n).filter(|&j| eig.eigenvalues[j] <= 1e-10 * scale).collect();
        eig.eigenvectors.select_columns(&cols)
    }

    /// Extreme eigenvalues of `B^T H^T H B` for one support.
    pub fn support_extremes(&self, support: &[usize]) -> Option<(f64, f64)> {
        let b = self.support_basis(support);
        if b.ncols() == 0 {
            return None;
        }
        let restricted = b.transpose() * &self.gram * &b;
        let ev = SymmetricEigen::new(restricted).eigenvalues;
        let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi))
    }

    fn level(&self, s: usize, supports: &mut dyn FnMut(&mut dyn FnMut(&[usize]) -> Result<()>) -> Result<u64>) -> Result<RicLevel> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let count = supports(&mut |sup| {
            if let Some((a, b)) = self.support_extremes(sup) {
                lo = lo.min(a);
                hi = hi.max(b);
            }
            Ok(())
        })?;
        let total = binomial(self.transform_dim(), s);
        if lo > hi {
            lo = 1.0;
            hi = 1.0;
        }
        Ok(RicLevel {
            s,
            delta: (1.0 - lo).max(hi - 1.0).max(0.0),
            lambda_min: lo,
            lambda_max: hi,
            supports: count,
            coverage: count as f64 / total.max(1) as f64,
        })
    }

    /// Exhaustive `delta_s` over all `s`-supports.
    pub fn delta(&self, s: usize) -> Result<RicLevel> {
        let l = self.transform_dim();
        if s == 0 || s > l {
            return Err(Error::config(format!("sparsity {s} outside 1..={l}")));
        }
        let total = binomial(l, s);
        if total > RIC_BUDGET {
            return Err(Error::Budget(format!(
                "C({l}, {s}) = {total} supports exceed the budget of {RIC_BUDGET}; use the sampled estimate"
            )));
        }
        self.level(s, &mut |visit| {
            for_each_subset(l, s, |sup| visit(sup))?;
            Ok(total)
        })
    }

    /// Lower estimate of `delta_s` from `count` uniformly drawn supports.
    pub fn delta_sampled(&self, s: usize, count: u64, stream: &RngStream) -> Result<RicLevel> {
        let l = self.transform_dim();
        if s == 0 || s > l {
            return Err(Error::config(format!("sparsity {s} outside 1..={l}")));
        }
        self.level(s, &mut |visit| {
            for i in 0..count {
                let mut rng = stream.at(i);
                let mut pool: Vec<usize> = (0..l).collect();
                for j in 0..s {
                    let pick = j + rng.below(l - j);
                    pool.swap(j, pick);
                }
                let mut sup = pool[..s].to_vec();
                sup.sort_unstable();
                visit(&sup)?;
            }
            Ok(count)
        })
    }

    /// Exhaustive report for `k`, `2k`, `3k` (capped at the transform size).
    pub fn report(&self, k: usize) -> Result<RicReport> {
        let l = self.transform_dim();
        let mut levels = Vec::new();
        for s in [k, 2 * k, 3 * k] {
            levels.push(self.delta(s.min(l))?);
        }
        let sum: f64 = levels.iter().map(|v| v.delta).sum();
        Ok(RicReport {
            k,
            levels,
            rip_satisfied: sum < 1.0,
        })
    }
}

/// Spectral norm of a row-major `m x n` matrix.
pub fn operator_norm(h: &[f64], m: usize, n: usize) -> Result<f64> {
    if h.len() != m * n {
        return Err(Error::config(format!("{} entries for a {m}x{n} matrix", h.len())));
    }
    let hm = DMatrix::from_row_slice(m, n, h);
    Ok(hm.singular_values().iter().cloned().fold(0.0, f64::max))
}

/// `(1 + |H|_2 / sqrt(1 - delta_k)) (eps + eps')`.
pub fn thm2_bound(delta_k: f64, h_norm: f64, eps: f64, eps_prime: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&delta_k) {
        return Err(Error::Domain(format!("delta_k = {delta_k} must lie in [0, 1)")));
    }
    if h_norm < 0.0 || eps < 0.0 || eps_prime < 0.0 {
        return Err(Error::Domain("norm and tolerances must be non-negative".into()));
    }
    Ok((1.0 + h_norm / (1.0 - delta_k).sqrt()) * (eps + eps_prime))
}
