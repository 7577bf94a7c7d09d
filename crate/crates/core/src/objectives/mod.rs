//! Training objectives: flow negative log-likelihood, the importance-weighted
//! ambient bound over a prior flow and a posterior flow, and its practical
//! form with a weighted noise term and a sparsity penalty.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{latent_batch, ConditionalFlowModel, FlowModel};
use crate::imaging::{MeasurementModel, SparsityModel};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// `log(mean(exp(values)))`, shifted by the maximum.
pub fn logavgexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("logavgexp of an empty list"));
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + (s / values.len() as f64).ln())
}

/// Row-wise logavgexp of `x: [B, M]`; returns `[B]`.
pub fn logavgexp_var<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let m = g.shape(x)[1];
    let l = g.logsumexp(x, 1)?;
    g.shift(l, S::of(-(m as f64).ln()))
}

/// `-mean log p(x)` over the rows of `batch`.
pub fn nll_var<S: Scalar>(g: &mut Graph<S>, flow: &FlowModel<S>, batch: Var) -> Result<Var> {
    let lp = flow.log_prob_var(g, batch, None)?;
    let m = g.mean(lp)?;
    g.neg(m)
}

pub fn nll<S: Scalar>(flow: &FlowModel<S>, batch: &Tensor<S>) -> Result<f64> {
    let mut g = Graph::no_grad();
    let v = g.constant(batch.clone());
    let l = nll_var(&mut g, flow, v)?;
    Ok(g.item(l).as_f64())
}

/// Weights of the practical objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Importance samples per measurement.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Weight of the noise log-likelihood inside the logavgexp.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Weight of the sparsity penalty.
    #[serde(default)]
    pub mu: f64,
}

fn default_m() -> usize {
    4
}

fn one() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            m: 4,
            lambda: 1.0,
            mu: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn bound(m: usize) -> Self {
        Self {
            m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("objective needs M >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::config("mu must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Input of the posterior network's conditioner for measurements `meas`:
/// the measurements themselves when widths agree, otherwise their
/// back-projection `H^T g`.
pub fn conditioner_input<S: Scalar>(
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
) -> Result<Tensor<S>> {
    let want = post.cond_input_dim();
    if want == model.output_dim() {
        Ok(meas.clone())
    } else if want == model.input_dim() {
        model.adjoint(meas)
    } else {
        Err(Error::config(format!(
            "conditioner width {want} fits neither the measurement ({}) nor the object ({}) dimension",
            model.output_dim(),
            model.input_dim()
        )))
    }
}

/// Graph nodes of one objective evaluation. Per-sample terms are `[B*M]`
/// with sample `i` of measurement `b` at row `b*M + i`.
pub struct AmbientEval {
    /// Scalar to maximize.
    pub objective: Var,
    /// Per-measurement logavgexp, `[B]`.
    pub per_row: Var,
    pub samples: Var,
    pub log_prior: Var,
    pub log_noise: Var,
    pub log_post: Var,
    pub penalty: Option<Var>,
}

/// Scalar summaries of an [`AmbientEval`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermMeans {
    pub objective: f64,
    pub log_prior: f64,
    pub log_noise: f64,
    pub log_post: f64,
    /// Mean sparsity penalty of the posterior samples (the constraint monitor).
    pub penalty: f64,
}

impl AmbientEval {
    pub fn means<S: Scalar>(&self, g: &Graph<S>) -> TermMeans {
        let mean = |v: Var| {
            let d = g.value(v);
            d.iter().map(|x| x.as_f64()).sum::<f64>() / d.len() as f64
        };
        TermMeans {
            objective: g.item(self.objective).as_f64(),
            log_prior: mean(self.log_prior),
            log_noise: mean(self.log_noise),
            log_post: mean(self.log_post),
            penalty: self.penalty.map(mean).unwrap_or(0.0),
        }
    }
}

fn repeat_rows(b: usize, m: usize) -> Vec<usize> {
    (0..b).flat_map(|r| std::iter::repeat(r).take(m)).collect()
}

/// Builds the practical objective
/// `mean_b logavgexp_i [log p(f_bi) + lambda log q_n(g_b - H f_bi) - log p(f_bi | g_b)]
///  - mu mean_bi penalty(f_bi)` with `f_bi = h(zeta_bi; g_b)`.
/// `zeta` is `[B*M, n]`; with `lambda = 1, mu = 0` this is the ambient bound.
#[allow(clippy::too_many_arguments)]
pub fn ambient_objective_var<S: Scalar>(
    g: &mut Graph<S>,
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    sparsity: Option<&SparsityModel<S>>,
    meas: &Tensor<S>,
    zeta: &Tensor<S>,
    cfg: &ObjectiveConfig,
) -> Result<AmbientEval> {
    cfg.validate()?;
    let (b, m) = (meas.rows(), cfg.m);
    if meas.rank() != 2 || meas.shape()[1] != model.output_dim() {
        return Err(Error::config(format!(
            "measurement batch must be [B, {}], got {:?}",
            model.output_dim(),
            meas.shape()
        )));
    }
    if zeta.shape() != [b * m, post.dim()] {
        return Err(Error::config(format!(
            "latent batch must be [{}, {}], got {:?}",
            b * m,
            post.dim(),
            zeta.shape()
        )));
    }
    if cfg.mu > 0.0 && sparsity.is_none() {
        return Err(Error::config("mu > 0 needs a sparsity model"));
    }
    let cin = conditioner_input(post, model, meas)?;
    let cin = g.constant(cin);
    let feats = post.features_var(g, cin).map_err(|e| e.context("log_post"))?;
    let idx = repeat_rows(b, m);
    let feats = if m == 1 { feats } else { g.gather(feats, 0, idx.clone())? };
    let mv = g.constant(meas.clone());
    let mv = if m == 1 { mv } else { g.gather(mv, 0, idx)? };
    let z = g.constant(zeta.clone());

    let (f, ld) = post
        .forward_with_features(g, z, feats)
        .map_err(|e| e.context("log_post"))?;
    let lq = crate::flow::std_normal_log_density(g, z)?;
    let log_post = g.sub(lq, ld).map_err(|e| e.context("log_post"))?;
    let log_prior = prior.log_prob_var(g, f, None).map_err(|e| e.context("log_prior"))?;
    let log_noise = model
        .log_likelihood_var(g, mv, f)
        .map_err(|e| e.context("log_noise"))?;

    let weighted = if cfg.lambda == 1.0 {
        log_noise
    } else {
        g.scale(log_noise, S::of(cfg.lambda))?
    };
    let w = g.add(log_prior, weighted)?;
    let w = g.sub(w, log_post)?;
    let w = g.reshape(w, vec![b, m])?;
    let per_row = logavgexp_var(g, w).map_err(|e| e.context("logavgexp"))?;
    let mut objective = g.mean(per_row)?;
    let penalty = match sparsity {
        Some(s) => {
            let p = s.penalty_var(g, f).map_err(|e| e.context("penalty"))?;
            if cfg.mu > 0.0 {
                let mp = g.mean(p)?;
                let mp = g.scale(mp, S::of(cfg.mu))?;
                objective = g.sub(objective, mp)?;
            }
            Some(p)
        }
        None => None,
    };
    Ok(AmbientEval {
        objective,
        per_row,
        samples: f,
        log_prior,
        log_noise,
        log_post,
        penalty,
    })
}

/// Fresh latents for a batch of `b` measurements with `m` samples each;
/// measurement `b` of the batch starting at `first` uses stream indices
/// `(first + b) * m ..`.
pub fn draw_latents<S: Scalar>(b: usize, m: usize, n: usize, stream: &RngStream, first: u64) -> Tensor<S> {
    latent_batch(b * m, n, stream, first * m as u64)
}

/// Per-measurement estimates of `L_M` (no sparsity term).
pub fn ambient_bound_rows<S: Scalar>(
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    m: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let zeta = draw_latents(meas.rows(), m, post.dim(), stream, 0);
    let mut g = Graph::no_grad();
    let e = ambient_objective_var(&mut g, prior, post, model, None, meas, &zeta, &ObjectiveConfig::bound(m))?;
    Ok(g.value(e.per_row).iter().map(|v| v.as_f64()).collect())
}

/// Batch-mean estimate of `L_M`.
pub fn ambient_bound<S: Scalar>(
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    m: usize,
    stream: &RngStream,
) -> Result<f64> {
    let rows = ambient_bound_rows(prior, post, model, meas, m, stream)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Evidence lower bound: the ambient bound with a single sample.
pub fn elbo<S: Scalar>(
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    stream: &RngStream,
) -> Result<f64> {
    ambient_bound(prior, post, model, meas, 1, stream)
}

/// Practical objective value (to maximize) with its term breakdown.
pub fn practical_objective<S: Scalar>(
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    sparsity: Option<&SparsityModel<S>>,
    meas: &Tensor<S>,
    cfg: &ObjectiveConfig,
    stream: &RngStream,
) -> Result<TermMeans> {
    let zeta = draw_latents(meas.rows(), cfg.m, post.dim(), stream, 0);
    let mut g = Graph::no_grad();
    let e = ambient_objective_var(&mut g, prior, post, model, sparsity, meas, &zeta, cfg)?;
    Ok(e.means(&g))
}
