use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sparsifying transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity { n: usize },
    /// Periodic forward differences of a length-`n` signal.
    DiscreteGradient1d { n: usize },
    /// Periodic forward differences along both axes of an `h x w` image,
    /// horizontal differences first.
    DiscreteGradient2d { h: usize, w: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySpec {
    pub transform: TransformSpec,
    pub k: usize,
}

/// Transform `Phi`, sparsity level `k` and the top-k residual penalty.
///
/// `Phi` is rescaled so its pseudo-inverse has unit spectral norm. The
/// periodic gradients annihilate constants; they are injective on the
/// zero-mean subspace.
#[derive(Clone, Debug)]
pub struct SparsityModel<S> {
    spec: SparsitySpec,
    scale: S,
    n: usize,
    l: usize,
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
pub fn project_topk<S: Scalar>(c: &[S], k: usize) -> Result<Vec<S>> {
    if k == 0 {
        return Err(Error::config("sparsity level k must be positive"));
    }
    if k > c.len() {
        return Err(Error::config(format!(
            "sparsity level {k} exceeds coefficient count {}",
            c.len()
        )));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| {
        c[b].abs()
            .partial_cmp(&c[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![S::zero(); c.len()];
    for &i in &order[..k] {
        out[i] = c[i];
    }
    Ok(out)
}

/// `|c - project_topk(c, k)|_1`.
pub fn topk_residual_l1<S: Scalar>(c: &[S], k: usize) -> Result<S> {
    let p = project_topk(c, k)?;
    Ok(c.iter().zip(&p).map(|(a, b)| (*a - *b).abs()).sum())
}

impl<S: Scalar> SparsityModel<S> {
    pub fn new(spec: SparsitySpec) -> Result<Self> {
        let (n, l, sigma_min) = match spec.transform {
            TransformSpec::Identity { n } => (n, n, 1.0),
            TransformSpec::DiscreteGradient1d { n } => {
                if n < 2 {
                    return Err(Error::config("1-D gradient needs at least 2 samples"));
                }
                (n, n, 2.0 * (std::f64::consts::PI / n as f64).sin())
            }
            TransformSpec::DiscreteGradient2d { h, w } => {
                let big = h.max(w);
                if big < 2 {
                    return Err(Error::config("2-D gradient needs an image with a side >= 2"));
                }
                (h * w, 2 * h * w, 2.0 * (std::f64::consts::PI / big as f64).sin())
            }
        };
        if n == 0 {
            return Err(Error::config("transform dimension must be positive"));
        }
        if spec.k == 0 || spec.k > l {
            return Err(Error::config(format!(
                "sparsity level {} outside 1..={l}",
                spec.k
            )));
        }
        Ok(Self {
            spec,
            scale: S::of(1.0 / sigma_min),
            n,
            l,
        })
    }

    pub fn spec(&self) -> &SparsitySpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn signal_dim(&self) -> usize {
        self.n
    }

    pub fn transform_dim(&self) -> usize {
        self.l
    }

    /// Global factor applied to the raw difference operator.
    pub fn scale(&self) -> S {
        self.scale
    }

    /// `c = Phi f` for one signal.
    pub fn sparsify(&self, f: &[S]) -> Result<Vec<S>> {
        if f.len() != self.n {
            return Err(Error::config(format!(
                "signal of length {} for a transform on {}",
                f.len(),
                self.n
            )));
        }
        let s = self.scale;
        Ok(match self.spec.transform {
            TransformSpec::Identity { .. } => f.to_vec(),
            TransformSpec::DiscreteGradient1d { n } => {
                (0..n).map(|i| (f[(i + 1) % n] - f[i]) * s).collect()
            }
            TransformSpec::DiscreteGradient2d { h, w } => {
                let mut c = Vec::with_capacity(2 * h * w);
                for y in 0..h {
                    for x in 0..w {
                        c.push((f[y * w + (x + 1) % w] - f[y * w + x]) * s);
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        c.push((f[((y + 1) % h) * w + x] - f[y * w + x]) * s);
                    }
                }
                c
            }
        })
    }

    /// `Phi f` for a `[batch, n]` node; returns `[batch, l]`.
    pub fn sparsify_var(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let b = match g.shape(f) {
            [b, c] if *c == self.n => *b,
            other => {
                return Err(Error::config(format!(
                    "sparsify: expected [batch, {}], got {other:?}",
                    self.n
                )))
            }
        };
        match self.spec.transform {
            TransformSpec::Identity { .. } => Ok(f),
            TransformSpec::DiscreteGradient1d { n } => {
                let shifted = g.gather(f, 1, (0..n).map(|i| (i + 1) % n).collect())?;
                let d = g.sub(shifted, f)?;
                g.scale(d, self.scale)
            }
            TransformSpec::DiscreteGradient2d { h, w } => {
                let img = g.reshape(f, vec![b, h, w])?;
                let sx = g.gather(img, 2, (0..w).map(|x| (x + 1) % w).collect())?;
                let dx = g.sub(sx, img)?;
                let sy = g.gather(img, 1, (0..h).map(|y| (y + 1) % h).collect())?;
                let dy = g.sub(sy, img)?;
                let dx = g.reshape(dx, vec![b, h * w])?;
                let dy = g.reshape(dy, vec![b, h * w])?;
                let c = g.concat(&[dx, dy], 1)?;
                g.scale(c, self.scale)
            }
        }
    }

    /// Row-major `l x n` matrix of `Phi`.
    pub fn matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.l * self.n];
        let mut e = vec![S::zero(); self.n];
        for j in 0..self.n {
            e[j] = S::one();
            let col = self.sparsify(&e).expect("basis vector has the right length");
            for (i, v) in col.iter().enumerate() {
                out[i * self.n + j] = v.as_f64();
            }
            e[j] = S::zero();
        }
        out
    }

    pub fn project_topk(&self, c: &[S]) -> Result<Vec<S>> {
        project_topk(c, self.spec.k)
    }

    /// `|Phi f - proj_k(Phi f)|_1` for one signal.
    pub fn penalty(&self, f: &[S]) -> Result<S> {
        topk_residual_l1(&self.sparsify(f)?, self.spec.k)
    }

    /// Per-row penalty of a `[batch, n]` node; returns `[batch]`. The top-k
    /// target is held constant, so gradients flow only through the
    /// un-thresholded coefficients.
    pub fn penalty_var(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let c = self.sparsify_var(g, f)?;
        let shape = g.shape(c).to_vec();
        let mut target = Vec::with_capacity(g.value(c).len());
        for row in g.value(c).chunks(self.l) {
            target.extend(project_topk(row, self.spec.k)?);
        }
        let t = g.constant_from(shape, target)?;
        let r = g.sub(c, t)?;
        let a = g.abs(r)?;
        g.sum_axis(a, 1)
    }

    /// Exact nearest point of `S_k` for the identity transform (hard
    /// thresholding). Other transforms have no closed-form projection.
    pub fn project_signal(&self, f: &[S]) -> Result<Vec<S>> {
        match self.spec.transform {
            TransformSpec::Identity { .. } => project_topk(f, self.spec.k),
            _ => Err(Error::config(
                "exact signal-domain projection is only available for the identity transform",
            )),
        }
    }
}
