//! Reconstruction with a trained prior: latent-space MAP estimation, annealed
//! Langevin posterior sampling, direct sampling through the posterior
//! network, and the posterior-consistency scatter.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlowModel, FlowModel};
use crate::imaging::{MeasurementModel, NoiseModel};
use crate::objectives::conditioner_input;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::training::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    /// Weight of `|z|^2` in `|g - H G(z)|^2 + lambda |z|^2`.
    #[serde(default = "map_lambda")]
    pub map_lambda: f64,
    #[serde(default = "map_steps")]
    pub steps: usize,
    /// Initial Adam step; it follows a cosine decay to 1% over `steps`.
    #[serde(default = "map_lr")]
    pub lr: f64,
    /// Random starts in addition to `z = 0`.
    #[serde(default = "restarts")]
    pub restarts: usize,
    #[serde(default = "one")]
    pub restart_std: f64,
}

fn map_lambda() -> f64 {
    0.1
}
fn map_steps() -> usize {
    300
}
fn map_lr() -> f64 {
    0.05
}
fn restarts() -> usize {
    3
}
fn one() -> f64 {
    1.0
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            map_lambda: map_lambda(),
            steps: map_steps(),
            lr: map_lr(),
            restarts: restarts(),
            restart_std: one(),
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.map_lambda >= 0.0 && self.map_lambda.is_finite()) {
            return Err(Error::config(format!("map_lambda must be finite and >= 0, got {}", self.map_lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("MAP learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MapResult<S> {
    pub estimate: Tensor<S>,
    pub latent: Tensor<S>,
    pub objective: f64,
    /// `|g - H f|_2` at the estimate.
    pub residual_norm: f64,
    /// Index of the winning start (0 is `z = 0`).
    pub restart: usize,
    /// Best objective seen so far after each step, over all starts.
    pub trace: Vec<f64>,
}

fn single_row<S: Scalar>(meas: &Tensor<S>, width: usize, what: &str) -> Result<Vec<S>> {
    let ok = match meas.shape() {
        [m] => *m == width,
        [1, m] => *m == width,
        _ => false,
    };
    if !ok {
        return Err(Error::config(format!(
            "{what}: expected one measurement of width {width}, got {:?}",
            meas.shape()
        )));
    }
    Ok(meas.data().to_vec())
}

/// `argmin_z |g - H G(z)|^2 + lambda |z|^2` by Adam from `z = 0` and
/// `restarts` Gaussian starts, all optimized together as one batch.
pub fn map_csgm<S: Scalar>(
    prior: &FlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    cfg: &MapConfig,
    stream: &RngStream,
) -> Result<MapResult<S>> {
    cfg.validate()?;
    let n = prior.dim();
    if model.input_dim() != n {
        return Err(Error::config(format!(
            "prior dimension {n} does not match operator input {}",
            model.input_dim()
        )));
    }
    let g_row = single_row(meas, model.output_dim(), "map_csgm")?;
    let m = g_row.len();
    let r = cfg.restarts + 1;
    let mut z0 = vec![S::zero(); r * n];
    for k in 1..r {
        let mut rng = stream.at(k as u64);
        for (j, v) in rng.normals::<S>(n).into_iter().enumerate() {
            z0[k * n + j] = v * S::of(cfg.restart_std);
        }
    }
    let mut store = ParameterStore::new(0);
    store.insert("z", Tensor::new(vec![r, n], z0)?)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: None,
        ..AdamConfig::default()
    })?;
    let target = Tensor::new(vec![1, m], g_row)?;
    let lam = S::of(cfg.map_lambda);

    let mut best = (f64::INFINITY, 0usize, Vec::new(), Vec::new());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let eval = (|| -> Result<_> {
            let z = g.param(&store, "z")?;
            let (x, _) = prior.forward_var(&mut g, z, None)?;
            let hx = model.apply_var(&mut g, x)?;
            let gt = g.constant(target.clone());
            let res = g.sub(gt, hx)?;
            let sq = g.square(res)?;
            let data = g.sum_axis(sq, 1)?;
            let zz = g.square(z)?;
            let zs = g.sum_axis(zz, 1)?;
            let reg = g.scale(zs, lam)?;
            let rows = g.add(data, reg)?;
            let total = g.sum(rows)?;
            Ok((x, data, rows, total))
        })();
        let (x, data, rows, total) = eval.map_err(|e| {
            Error::Divergence {
                step: step as u64,
                detail: format!("{e}; best-so-far trace tail {:?}", &trace[trace.len().saturating_sub(5)..]),
            }
        })?;
        let vals: Vec<f64> = g.value(rows).iter().map(|v| v.as_f64()).collect();
        for (k, &v) in vals.iter().enumerate() {
            if v < best.0 {
                let xv = g.value(x)[k * n..(k + 1) * n].to_vec();
                let zv = store.get("z").expect("inserted").data()[k * n..(k + 1) * n].to_vec();
                let _ = g.value(data);
                best = (v, k, xv, zv);
            }
        }
        if step == cfg.steps {
            break;
        }
        trace.push(best.0);
        let progress = step as f64 / cfg.steps as f64;
        adam.set_lr(cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())));
        let grads = g.backward(total)?;
        adam.step(&mut [&mut store], &grads).map_err(|e| Error::Divergence {
            step: step as u64,
            detail: e.to_string(),
        })?;
    }
    if let Some(last) = trace.last_mut() {
        *last = best.0;
    }
    let estimate = Tensor::new(vec![n], best.2)?;
    let hf = model.apply(&estimate.clone().reshape(vec![1, n])?)?;
    let residual_norm = hf
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(MapResult {
        estimate,
        latent: Tensor::new(vec![n], best.3)?,
        objective: best.0,
        residual_norm,
        restart: best.1,
        trace,
    })
}

/// One rung of the annealing ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AldLevel {
    /// Extra likelihood standard deviation at this rung.
    pub sigma: f64,
    /// Langevin step size.
    pub step: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AldSchedule {
    pub levels: Vec<AldLevel>,
}

impl AldSchedule {
    /// `count` levels geometrically spaced from `sigma_max` to `sigma_min`,
    /// with step size `step_max * (sigma / sigma_max)^2`.
    pub fn geometric(sigma_max: f64, sigma_min: f64, count: usize, steps: usize, step_max: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("ALD needs at least one level"));
        }
        let ratio = if count > 1 {
            (sigma_min / sigma_max).powf(1.0 / (count - 1) as f64)
        } else {
            1.0
        };
        let levels = (0..count)
            .map(|i| {
                let sigma = sigma_max * ratio.powi(i as i32);
                AldLevel {
                    sigma,
                    step: step_max * (sigma / sigma_max).powi(2),
                    steps,
                }
            })
            .collect();
        let s = AldSchedule { levels };
        s.validate()?;
        Ok(s)
    }

    /// Appends a final rung.
    pub fn then(mut self, sigma: f64, step: f64, steps: usize) -> Result<Self> {
        self.levels.push(AldLevel { sigma, step, steps });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("ALD schedule has no levels"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.sigma >= 0.0 && l.sigma.is_finite() && l.step > 0.0 && l.step.is_finite() && l.steps > 0) {
                return Err(Error::config(format!("ALD level {i} is invalid: {l:?}")));
            }
            if i > 0 && l.sigma > self.levels[i - 1].sigma {
                return Err(Error::config(format!("ALD level {i} increases the noise level")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.levels.iter().map(|l| l.steps).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleSource {
    Ald,
    PosteriorNetwork,
}

/// Approximate posterior draws for one measurement, `[N, n]`.
#[derive(Clone, Debug)]
pub struct PosteriorEnsemble<S> {
    pub samples: Tensor<S>,
    pub source: EnsembleSource,
    pub schedule: Option<AldSchedule>,
}

/// `N` Langevin chains on `log p_theta(f) + log q(g - H f)`, where at each
/// level the noise variance is inflated by `sigma_level^2`. Chains start at
/// prior samples; chain `c` draws its noise from its own sub-stream.
pub fn ald_sample<S: Scalar>(
    prior: &FlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    count: usize,
    schedule: &AldSchedule,
    stream: &RngStream,
) -> Result<PosteriorEnsemble<S>> {
    schedule.validate()?;
    if count == 0 {
        return Err(Error::config("ALD needs at least one chain"));
    }
    let n = prior.dim();
    let g_row = single_row(meas, model.output_dim(), "ald_sample")?;
    let m = g_row.len();
    let target = Tensor::new(vec![1, m], g_row)?;
    let mut f = prior.sample(count, &stream.split("init"))?;
    let chains: Vec<RngStream> = (0..count).map(|c| stream.split(&format!("chain/{c}"))).collect();
    let base = model.noise();
    let mut t: u64 = 0;
    for (li, level) in schedule.levels.iter().enumerate() {
        let lik = model.with_noise(NoiseModel {
            sigma: (base.sigma * base.sigma + level.sigma * level.sigma).sqrt(),
            ..base
        })?;
        let eta = S::of(level.step);
        let kick = S::of((2.0 * level.step).sqrt());
        for _ in 0..level.steps {
            let score = (|| -> Result<Vec<S>> {
                let mut g = Graph::new();
                let x = g.leaf(f.clone());
                let lp = prior.log_prob_var(&mut g, x, None)?;
                let gt = g.constant(target.clone());
                let ll = lik.log_likelihood_var(&mut g, gt, x)?;
                let total = g.add(lp, ll)?;
                let root = g.sum(total)?;
                let grads = g.backward(root)?;
                let s = grads.wrt(x).ok_or_else(|| Error::usage("ALD chain state lost its gradient"))?;
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric("score", "non-finite score"));
                }
                Ok(s.to_vec())
            })()
            .map_err(|e| e.context(format!("ald level {li}")))?;
            let data = f.data_mut();
            for (c, rng) in chains.iter().enumerate() {
                let noise = rng.at(t).normals::<S>(n);
                for j in 0..n {
                    let i = c * n + j;
                    data[i] = data[i] + eta * score[i] + kick * noise[j];
                }
            }
            if !f.all_finite() {
                return Err(Error::numeric(format!("ald level {li}/update"), "chain state became non-finite"));
            }
            t += 1;
        }
    }
    Ok(PosteriorEnsemble {
        samples: f,
        source: EnsembleSource::Ald,
        schedule: Some(schedule.clone()),
    })
}

/// `N` draws `h_phi(zeta_i; g)` from the posterior network.
pub fn posterior_net_sample<S: Scalar>(
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    count: usize,
    stream: &RngStream,
) -> Result<PosteriorEnsemble<S>> {
    let g_row = single_row(meas, model.output_dim(), "posterior_net_sample")?;
    let cond = conditioner_input(post, model, &Tensor::new(vec![1, g_row.len()], g_row)?)?;
    Ok(PosteriorEnsemble {
        samples: post.sample(&cond, count, stream)?,
        source: EnsembleSource::PosteriorNetwork,
        schedule: None,
    })
}

/// Per-pixel mean and `(N-1)`-denominator standard deviation.
pub fn mmse_and_std<S: Scalar>(ensemble: &PosteriorEnsemble<S>) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = &ensemble.samples;
    if x.rank() != 2 || x.rows() < 2 {
        return Err(Error::usage(format!(
            "MMSE and std maps need at least 2 samples, got shape {:?}",
            x.shape()
        )));
    }
    let (rows, n) = (x.rows(), x.shape()[1]);
    let mut mean = vec![0.0; n];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; n];
    for r in 0..rows {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(x.row(r)) {
            *s += (v.as_f64() - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / (rows - 1) as f64).sqrt()).collect();
    Ok((mean, std))
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage(format!(
            "a slope needs at least 2 paired points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope of points with identical abscissae".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub measurement: usize,
    /// `log p_phi(f | g)`.
    pub log_post: f64,
    /// `log q_n(g - H f) + log p_theta(f)`.
    pub log_joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub points: Vec<ScatterPoint>,
    /// Slope of `log_post` against `log_joint`, per measurement.
    pub slopes: Vec<f64>,
}

impl ConsistencyReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["measurement", "log_post", "log_joint"])?;
        for p in &self.points {
            w.write_record([p.measurement.to_string(), format!("{:e}", p.log_post), format!("{:e}", p.log_joint)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_slopes(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "measurement,slope")?;
        for (i, s) in self.slopes.iter().enumerate() {
            writeln!(out, "{i},{s:e}")?;
        }
        Ok(())
    }
}

/// For each measurement row, draws `count` samples from the posterior network
/// and pairs their posterior log-density with the unnormalized log posterior
/// induced by the prior.
pub fn posterior_consistency_scatter<S: Scalar>(
    prior: &FlowModel<S>,
    post: &ConditionalFlowModel<S>,
    model: &MeasurementModel<S>,
    meas: &Tensor<S>,
    count: usize,
    stream: &RngStream,
) -> Result<ConsistencyReport> {
    if count < 2 {
        return Err(Error::usage("posterior consistency needs at least 2 samples per measurement"));
    }
    if meas.rank() != 2 || meas.shape()[1] != model.output_dim() {
        return Err(Error::config(format!(
            "expected [G, {}] measurements, got {:?}",
            model.output_dim(),
            meas.shape()
        )));
    }
    let mut points = Vec::new();
    let mut slopes = Vec::new();
    for i in 0..meas.rows() {
        let row = Tensor::new(vec![1, meas.shape()[1]], meas.row(i).to_vec())?;
        let ens = posterior_net_sample(post, model, &row, count, &stream.split(&format!("g/{i}")))?;
        let cond = conditioner_input(post, model, &row)?;
        let lpost = post.cond_log_prob(&ens.samples, &cond)?;
        let lprior = prior.log_prob(&ens.samples)?;
        let hf = model.apply(&ens.samples)?;
        let mut xs = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        for r in 0..count {
            let resid: Vec<S> = row.data().iter().zip(hf.row(r)).map(|(a, b)| *a - *b).collect();
            let joint = model.noise_log_density(&resid)? + lprior[r].as_f64();
            xs.push(joint);
            ys.push(lpost[r].as_f64());
            points.push(ScatterPoint {
                measurement: i,
                log_post: lpost[r].as_f64(),
                log_joint: joint,
            });
        }
        slopes.push(fit_slope(&xs, &ys)?);
    }
    Ok(ConsistencyReport { points, slopes })
}
