use serde::Serialize;

use super::wasserstein::w1_empirical;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{project_topk, SparsityModel, TransformSpec};
use crate::scalar::Scalar;

/// Largest number of supports enumerated by [`project_signal`].
pub const PROJECTION_BUDGET: u64 = 1_000_000;

pub(crate) fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Calls `f` on every `k`-subset of `0..n` in lexicographic order.
pub(crate) fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    if k > n {
        return Ok(());
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx)?;
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return Ok(());
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Nearest piecewise-constant periodic signal whose jumps sit after the
/// positions in `cuts` (a jump between `i` and `i + 1`).
fn cell_means(f: &[f64], cuts: &[usize]) -> Vec<f64> {
    let n = f.len();
    if cuts.len() <= 1 {
        let m = f.iter().sum::<f64>() / n as f64;
        return vec![m; n];
    }
    let mut out = vec![0.0; n];
    for (c, &start_cut) in cuts.iter().enumerate() {
        let end_cut = cuts[(c + 1) % cuts.len()];
        let first = (start_cut + 1) % n;
        let len = (end_cut + n - start_cut - 1) % n + 1;
        let idx: Vec<usize> = (0..len).map(|t| (first + t) % n).collect();
        let m = idx.iter().map(|&i| f[i]).sum::<f64>() / len as f64;
        for i in idx {
            out[i] = m;
        }
    }
    out
}

/// Orthogonal projection of `f` onto `S_k = {v : |Phi v|_0 <= k}`.
///
/// Hard thresholding for the identity transform; for the periodic 1-D
/// gradient the best support is found by enumeration. The 2-D gradient has
/// no tractable exact projection and is rejected.
pub fn project_signal<S: Scalar>(model: &SparsityModel<S>, f: &[S]) -> Result<Vec<S>> {
    match model.spec().transform {
        TransformSpec::Identity { .. } => project_topk(f, model.k()),
        TransformSpec::DiscreteGradient1d { n } => {
            if f.len() != n {
                return Err(Error::config(format!("signal of length {} for n = {n}", f.len())));
            }
            let k = model.k().min(n);
            let count = binomial(n, k);
            if count > PROJECTION_BUDGET {
                return Err(Error::Budget(format!(
                    "projection would enumerate {count} supports (budget {PROJECTION_BUDGET})"
                )));
            }
            let x: Vec<f64> = f.iter().map(|v| v.as_f64()).collect();
            let mut best = (f64::INFINITY, x.clone());
            for_each_subset(n, k, |cuts| {
                let p = cell_means(&x, cuts);
                let d: f64 = x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, p);
                }
                Ok(())
            })?;
            Ok(best.1.into_iter().map(S::of).collect())
        }
        TransformSpec::DiscreteGradient2d { .. } => Err(Error::config(
            "exact signal-domain projection is not available for the 2-D gradient",
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProjectionLemma {
    pub w1: f64,
    pub mean_projection_distance: f64,
    pub equal: bool,
}

/// Compares `W1(q, q^S)` computed by assignment with the mean distance of
/// each point to its projection. Equality holds because every point's own
/// projection is its nearest member of `S_k`.
pub fn check_projection_lemma<S: Scalar>(x: &Tensor<S>, model: &SparsityModel<S>) -> Result<ProjectionLemma> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::usage("projection lemma needs a non-empty [N, n] sample set"));
    }
    let mut rows = Vec::with_capacity(x.rows());
    let mut total = 0.0;
    for r in 0..x.rows() {
        let p = project_signal(model, x.row(r))?;
        total += x
            .row(r)
            .iter()
            .zip(&p)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        rows.push(p);
    }
    let proj = Tensor::stack_rows(&rows)?;
    let w1 = w1_empirical(x, &proj)?;
    if !w1.exact {
        return Err(Error::usage(format!(
            "projection lemma needs an exact assignment; {} points exceed the cap",
            x.rows()
        )));
    }
    let mean = total / x.rows() as f64;
    Ok(ProjectionLemma {
        w1: w1.value,
        mean_projection_distance: mean,
        equal: (w1.value - mean).abs() <= 1e-9,
    })
}
