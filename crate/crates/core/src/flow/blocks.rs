use serde::{Deserialize, Serialize};

use super::mlp::{self, Activation};
use crate::diff::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// One invertible layer. Trainable values live in the model's parameter
/// store under `{model}.b{index}.*`; the spec holds everything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BlockSpec {
    /// Transforms one half of the coordinates with a scale and shift
    /// predicted from the other half (and the conditioning features).
    AffineCoupling { flip: bool },
    /// Fixed reordering: output `i` is input `perm[i]`.
    ChannelPermutation { perm: Vec<usize> },
    /// Per-coordinate scale and shift.
    Actnorm,
    /// Dense invertible linear map `W = P L U`, `L` unit lower triangular,
    /// `U` upper triangular with a positive diagonal.
    #[serde(rename = "invertible-1x1-mix")]
    Mix { perm: Vec<usize> },
    /// Space-to-channel reshuffle of a `[c, h, w]` image into `[4c, h/2, w/2]`.
    Squeeze { channels: usize, height: usize, width: usize },
}

impl BlockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::AffineCoupling { .. } => "affine-coupling",
            BlockSpec::ChannelPermutation { .. } => "channel-permutation",
            BlockSpec::Actnorm => "actnorm",
            BlockSpec::Mix { .. } => "invertible-1x1-mix",
            BlockSpec::Squeeze { .. } => "squeeze",
        }
    }
}

/// Network shape shared by all coupling blocks of a model.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CouplingNet {
    pub hidden: usize,
    pub activation: Activation,
    pub clamp: f64,
    pub cond_dim: usize,
}

pub(crate) fn coupling_split(dim: usize, flip: bool) -> (Vec<usize>, Vec<usize>) {
    let s = dim / 2;
    let (lo, hi): (Vec<usize>, Vec<usize>) = ((0..s).collect(), (s..dim).collect());
    if flip {
        (hi, lo)
    } else {
        (lo, hi)
    }
}

pub(crate) fn squeeze_perm(c: usize, h: usize, w: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut perm = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..h2 {
                    for x in 0..w2 {
                        perm.push((ch * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    perm
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn check_perm(perm: &[usize], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    if perm.len() != dim {
        return Err(Error::config(format!(
            "permutation has length {}, expected {dim}",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= dim || seen[p] {
            return Err(Error::config(format!("not a permutation of 0..{dim}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn validate(spec: &BlockSpec, dim: usize) -> Result<()> {
    match spec {
        BlockSpec::AffineCoupling { .. } => {
            if dim < 2 {
                return Err(Error::config("affine coupling needs dim >= 2"));
            }
        }
        BlockSpec::ChannelPermutation { perm } | BlockSpec::Mix { perm } => check_perm(perm, dim)?,
        BlockSpec::Actnorm => {}
        BlockSpec::Squeeze {
            channels,
            height,
            width,
        } => {
            if channels * height * width != dim || height % 2 != 0 || width % 2 != 0 {
                return Err(Error::config(format!(
                    "squeeze of [{channels}, {height}, {width}] does not fit dim {dim} with even sides"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn init_params<S: Scalar>(
    spec: &BlockSpec,
    prefix: &str,
    dim: usize,
    net: CouplingNet,
    store: &mut ParameterStore<S>,
    rng: &mut RngStream,
) -> Result<()> {
    match spec {
        BlockSpec::AffineCoupling { flip } => {
            let (a, b) = coupling_split(dim, *flip);
            let sizes = [a.len() + net.cond_dim, net.hidden, net.hidden, 2 * b.len()];
            mlp::init(store, &format!("{prefix}.net"), &sizes, rng, true)
        }
        BlockSpec::Actnorm => {
            store.insert(format!("{prefix}.log_scale"), Tensor::zeros(&[dim]))?;
            store.insert(format!("{prefix}.shift"), Tensor::zeros(&[dim]))
        }
        BlockSpec::Mix { .. } => {
            store.insert(format!("{prefix}.lower"), Tensor::zeros(&[dim, dim]))?;
            store.insert(format!("{prefix}.upper"), Tensor::zeros(&[dim, dim]))?;
            store.insert(format!("{prefix}.log_diag"), Tensor::zeros(&[dim]))
        }
        BlockSpec::ChannelPermutation { .. } | BlockSpec::Squeeze { .. } => Ok(()),
    }
}

/// Result of pushing a batch through one block.
pub(crate) struct Step {
    pub out: Var,
    /// Per-row log-det, `[B]` or `[1]` when shared by all rows; `None` if zero.
    pub logdet: Option<Var>,
}

fn tri_masks<S: Scalar>(dim: usize) -> (Tensor<S>, Tensor<S>) {
    let mut lo = vec![S::zero(); dim * dim];
    let mut up = vec![S::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            if j < i {
                lo[i * dim + j] = S::one();
            } else if j > i {
                up[i * dim + j] = S::one();
            }
        }
    }
    (
        Tensor::new(vec![dim, dim], lo).expect("mask"),
        Tensor::new(vec![dim, dim], up).expect("mask"),
    )
}

/// Assembles the unit lower factor and the upper factor of a mix block.
fn mix_factors<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    dim: usize,
) -> Result<(Var, Var, Var)> {
    let (mlo, mup) = tri_masks::<S>(dim);
    let mlo = g.constant(mlo);
    let mup = g.constant(mup);
    let eye = g.constant(Tensor::eye(dim));
    let lower = g.param(store, &format!("{prefix}.lower"))?;
    let upper = g.param(store, &format!("{prefix}.upper"))?;
    let log_diag = g.param(store, &format!("{prefix}.log_diag"))?;
    let l = g.mul(lower, mlo)?;
    let l = g.add(l, eye)?;
    let u = g.mul(upper, mup)?;
    let d = g.exp(log_diag)?;
    let d = g.reshape(d, vec![1, dim])?;
    let d = g.mul(eye, d)?;
    let u = g.add(u, d)?;
    Ok((l, u, log_diag))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply<S: Scalar>(
    spec: &BlockSpec,
    prefix: &str,
    dim: usize,
    net: CouplingNet,
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    x: Var,
    cond: Option<Var>,
    inverse: bool,
) -> Result<Step> {
    match spec {
        BlockSpec::ChannelPermutation { perm } => {
            let idx = if inverse { invert_perm(perm) } else { perm.clone() };
            Ok(Step {
                out: g.gather(x, 1, idx)?,
                logdet: None,
            })
        }
        BlockSpec::Squeeze {
            channels,
            height,
            width,
        } => {
            let perm = squeeze_perm(*channels, *height, *width);
            let idx = if inverse { invert_perm(&perm) } else { perm };
            Ok(Step {
                out: g.gather(x, 1, idx)?,
                logdet: None,
            })
        }
        BlockSpec::Actnorm => {
            let ls = g.param(store, &format!("{prefix}.log_scale"))?;
            let b = g.param(store, &format!("{prefix}.shift"))?;
            let total = g.sum(ls)?;
            if inverse {
                let y = g.sub(x, b)?;
                let nls = g.neg(ls)?;
                let s = g.exp(nls)?;
                Ok(Step {
                    out: g.mul(y, s)?,
                    logdet: Some(g.neg(total)?),
                })
            } else {
                let s = g.exp(ls)?;
                let y = g.mul(x, s)?;
                Ok(Step {
                    out: g.add(y, b)?,
                    logdet: Some(total),
                })
            }
        }
        BlockSpec::Mix { perm } => {
            let (l, u, log_diag) = mix_factors(g, store, prefix, dim)?;
            let total = g.sum(log_diag)?;
            if inverse {
                // x = U^-1 L^-1 P^T y, column convention
                let y = g.gather(x, 1, invert_perm(perm))?;
                let yt = g.transpose(y)?;
                let z = g.tri_solve(l, yt, true)?;
                let z = g.tri_solve(u, z, false)?;
                Ok(Step {
                    out: g.transpose(z)?,
                    logdet: Some(g.neg(total)?),
                })
            } else {
                // row convention: y = x U^T L^T P^T
                let ut = g.transpose(u)?;
                let lt = g.transpose(l)?;
                let y = g.matmul(x, ut)?;
                let y = g.matmul(y, lt)?;
                Ok(Step {
                    out: g.gather(y, 1, perm.clone())?,
                    logdet: Some(total),
                })
            }
        }
        BlockSpec::AffineCoupling { flip } => {
            let (ia, ib) = coupling_split(dim, *flip);
            let xa = g.gather(x, 1, ia.clone())?;
            let xb = g.gather(x, 1, ib.clone())?;
            let input = match cond {
                Some(c) => g.concat(&[xa, c], 1)?,
                None => xa,
            };
            let h = mlp::forward(g, store, &format!("{prefix}.net"), 3, net.activation, input)?;
            let nb = ib.len();
            let raw = g.slice(h, 1, 0, nb)?;
            let t = g.slice(h, 1, nb, nb)?;
            let alpha = S::of(net.clamp);
            let s = g.scale(raw, S::one() / alpha)?;
            let s = g.tanh(s)?;
            let s = g.scale(s, alpha)?;
            let ld = g.sum_axis(s, 1)?;
            let (yb, ld) = if inverse {
                let d = g.sub(xb, t)?;
                let ns = g.neg(s)?;
                let e = g.exp(ns)?;
                (g.mul(d, e)?, g.neg(ld)?)
            } else {
                let e = g.exp(s)?;
                let m = g.mul(xb, e)?;
                (g.add(m, t)?, ld)
            };
            let joined = g.concat(&[xa, yb], 1)?;
            let order: Vec<usize> = ia.iter().chain(&ib).copied().collect();
            let out = if order.iter().enumerate().all(|(i, &p)| i == p) {
                joined
            } else {
                g.gather(joined, 1, invert_perm(&order))?
            };
            Ok(Step {
                out,
                logdet: Some(ld),
            })
        }
    }
}
