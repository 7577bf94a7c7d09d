//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct FdReport {
    /// max over coordinates of |analytic - central| / (|central| + 1e-12)
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// max over coordinates of |analytic - central|
    pub max_abs_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// One-sided differences disagree somewhere: the point sits on a kink and
    /// the comparison should not be trusted.
    pub kink: bool,
}

impl FdReport {
    /// Error relative to the largest gradient entry; robust to coordinates
    /// whose true derivative is exactly zero.
    pub fn scaled_error(&self) -> f64 {
        let scale = self.numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.max_abs_error / (scale + 1e-12)
    }
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences of step `h`.
pub fn finite_diff_check<S, F>(f: F, point: &Tensor<S>, h: f64) -> Result<FdReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let f0 = g.item(y).as_f64();
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.wrt(x) {
        Some(d) => d.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; point.len()],
    };

    let eval = |data: Vec<S>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new(point.shape().to_vec(), data)?);
        let y = f(&mut g, x)?;
        Ok(g.item(y).as_f64())
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut kink = false;
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    let mut max_abs = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] = plus[i] + S::of(h);
        minus[i] = minus[i] - S::of(h);
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let central = (fp - fm) / (2.0 * h);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-8) && (fwd - bwd).abs() > 1e-6 {
            kink = true;
        }
        let abs = (analytic[i] - central).abs();
        max_abs = max_abs.max(abs);
        let rel = abs / (central.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        numeric.push(central);
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        worst_index: worst,
        max_abs_error: max_abs,
        analytic,
        numeric,
        kink,
    })
}
