use serde::Serialize;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest set size solved exactly.
pub const EXACT_CAP: usize = 512;

/// Empirical Wasserstein-1 distance between equal-size sample sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct W1Estimate {
    pub value: f64,
    /// `true` for the exact assignment solution, `false` for the entropic
    /// approximation used above [`EXACT_CAP`].
    pub exact: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimum-cost perfect matching of a square cost matrix (row-major) by
/// shortest augmenting paths with potentials. Returns `col_of_row`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual source
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

fn rows_f64<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Log-domain Sinkhorn with costs recomputed on the fly. The regularization
/// halves every 10 sweeps from `start` down to `eps`; returns the transport
/// cost of the final entropic plan.
pub(crate) fn sinkhorn(x: &[Vec<f64>], y: &[Vec<f64>], start: f64, eps: f64, iters: usize) -> f64 {
    let n = x.len();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let logw = -(n as f64).ln();
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
    };
    let mut e = start.max(eps);
    let mut buf = vec![0.0; n];
    for it in 0..iters {
        if it > 0 && it % 10 == 0 {
            e = (e * 0.5).max(eps);
        }
        for i in 0..n {
            for j in 0..n {
                buf[j] = (g[j] - dist(&x[i], &y[j])) / e + logw;
            }
            f[i] = -e * lse(&buf);
        }
        for j in 0..n {
            for i in 0..n {
                buf[i] = (f[i] - dist(&x[i], &y[j])) / e + logw;
            }
            g[j] = -e * lse(&buf);
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = dist(&x[i], &y[j]);
            total += c * ((f[i] + g[j] - c) / e + 2.0 * logw).exp();
        }
    }
    total
}

/// `W1` between the empirical distributions of the rows of `x` and `y`.
pub fn w1_empirical<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<W1Estimate> {
    if x.rank() != 2 || y.rank() != 2 || x.shape() != y.shape() {
        return Err(Error::usage(format!(
            "w1 needs equal-size sample sets, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (a, b) = (rows_f64(x), rows_f64(y));
    let n = a.len();
    if n > EXACT_CAP {
        let scale = a.iter().chain(&b).map(|r| dist(r, &vec![0.0; r.len()])).fold(0.0, f64::max);
        return Ok(W1Estimate {
            value: sinkhorn(&a, &b, scale.max(1e-12), 1e-3 * scale.max(1e-12), 200),
            exact: false,
        });
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = dist(&a[i], &b[j]);
        }
    }
    let m = assignment(&cost, n);
    let total: f64 = (0..n).map(|i| cost[i * n + m[i]]).sum();
    Ok(W1Estimate {
        value: total / n as f64,
        exact: true,
    })
}
