use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Isotropic Gaussian measurement noise. Complex measurements are stored as
/// real/imaginary channel pairs with independent noise of the same sigma on
/// each channel, so the density is the real one over all stored values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    #[serde(default)]
    pub complex: bool,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            sigma,
            complex: false,
        }
    }

    pub fn complex_gaussian(sigma: f64) -> Self {
        Self {
            sigma,
            complex: true,
        }
    }

    fn require_positive(&self) -> Result<()> {
        if self.sigma > 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "noise log-density needs sigma > 0, got {}",
                self.sigma
            )))
        }
    }

    /// `-|r|^2 / (2 sigma^2) - (m/2) log(2 pi sigma^2)` for one residual.
    pub fn log_density<S: Scalar>(&self, residual: &[S]) -> Result<f64> {
        self.require_positive()?;
        let s2 = self.sigma * self.sigma;
        let m = residual.len() as f64;
        let sq: f64 = residual.iter().map(|v| v.as_f64().powi(2)).sum();
        Ok(-sq / (2.0 * s2) - 0.5 * m * (2.0 * std::f64::consts::PI * s2).ln())
    }

    /// Per-row log-density of a `[batch, m]` residual node; returns `[batch]`.
    pub fn log_density_var<S: Scalar>(&self, g: &mut Graph<S>, residual: Var) -> Result<Var> {
        self.require_positive()?;
        let shape = g.shape(residual).to_vec();
        if shape.len() != 2 {
            return Err(Error::config(format!(
                "noise log-density expects [batch, m], got {shape:?}"
            )));
        }
        let m = shape[1] as f64;
        let s2 = self.sigma * self.sigma;
        let sq = g.square(residual)?;
        let ss = g.sum_axis(sq, 1)?;
        g.affine(
            ss,
            S::of(-1.0 / (2.0 * s2)),
            S::of(-0.5 * m * (2.0 * std::f64::consts::PI * s2).ln()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check, Tensor};

    #[test]
    fn zero_residual_unit_sigma() {
        let n = NoiseModel::gaussian(1.0);
        let v = n.log_density(&[0.0f64]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn analytic_form() {
        let n = NoiseModel::gaussian(0.45);
        let r = [0.3f64, -0.1, 0.25];
        let expect = -(0.09 + 0.01 + 0.0625) / (2.0 * 0.2025)
            - 1.5 * (2.0 * std::f64::consts::PI * 0.2025).ln();
        assert!((n.log_density(&r).unwrap() - expect).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let rv = g.constant(Tensor::from_f64(vec![1, 3], &r).unwrap());
        let lv = n.log_density_var(&mut g, rv).unwrap();
        assert!((g.item(lv) - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_minus_residual_over_variance() {
        let n = NoiseModel::gaussian(0.7);
        let r = Tensor::<f64>::from_f64(vec![1, 4], &[0.2, -0.4, 1.1, 0.05]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let l = n.log_density_var(g, x)?;
                g.sum(l)
            },
            &r,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
        for (a, v) in report.analytic.iter().zip(r.data()) {
            assert!((a + v / 0.49).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_has_no_density() {
        assert!(NoiseModel::gaussian(0.0).log_density(&[0.0f64]).is_err());
    }
}
