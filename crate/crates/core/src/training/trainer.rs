use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{ConditionerKind, DatasetSpec, ExperimentConfig, Mode};
use super::dataset::{ingest_directory, make_piecewise, make_toy2d, Dataset};
use crate::diff::{Graph, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::checkpoint::{load_conditional, load_flow, save_conditional, save_flow};
use crate::flow::{ConditionalArch, ConditionalFlowModel, ConditionerSpec, FlowArch, FlowModel};
use crate::imaging::{MeasurementModel, SparsityModel};
use crate::objectives::{ambient_objective_var, conditioner_input, draw_latents, nll_var};
use crate::rng::{RngCursor, RngStream};
use crate::scalar::Scalar;

/// One row of the metric history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Minimized quantity: NLL (conventional) or minus the objective.
    pub loss: f64,
    pub log_prior: f64,
    pub log_noise: f64,
    pub log_post: f64,
    /// Mean sparsity penalty of posterior samples (constraint monitor).
    pub penalty: f64,
    pub grad_norm: f64,
}

/// Objects and measurements described by `cfg.dataset`, measured through
/// `cfg.measurement` in ambient mode.
pub fn build_dataset<S: Scalar>(cfg: &ExperimentConfig) -> Result<Dataset<S>> {
    let sigma_n = cfg.measurement.as_ref().map(|m| m.noise.sigma).unwrap_or(0.0);
    let data = match &cfg.dataset {
        DatasetSpec::Toy2dOctagon { size, .. } => {
            let toy = cfg.dataset.toy(if cfg.mode == Mode::Ambient { sigma_n } else { 0.0 }).expect("toy");
            let d = make_toy2d(&toy, *size, cfg.seed)?;
            return Ok(d);
        }
        DatasetSpec::PiecewiseImage { size, .. } => {
            make_piecewise(&cfg.dataset.piecewise().expect("piecewise"), *size, cfg.seed)?
        }
        DatasetSpec::TensorDirectory { path, shape } => ingest_directory(path, shape)?,
    };
    match (&cfg.measurement, cfg.mode) {
        (Some(m), Mode::Ambient) => {
            let model = MeasurementModel::new(m.clone())?;
            data.with_measurements(&model, &RngStream::new(cfg.seed, "data/noise"))
        }
        _ => Ok(data),
    }
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    step: u64,
    /// Streams of the next step.
    cursors: Vec<RngCursor>,
}

/// Training loop state: models, optimizer, step counter and history.
pub struct Trainer<S> {
    cfg: ExperimentConfig,
    prior: FlowModel<S>,
    post: Option<ConditionalFlowModel<S>>,
    model: Option<MeasurementModel<S>>,
    sparsity: Option<SparsityModel<S>>,
    adam: Adam,
    step: u64,
    history: Vec<MetricRow>,
}

fn sampled_rows<S: Scalar>(t: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    let n = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), n], out)
}

impl<S: Scalar> Trainer<S> {
    fn batch_stream(&self) -> RngStream {
        RngStream::new(self.cfg.seed, "train/batch")
    }

    fn build_models(cfg: &ExperimentConfig) -> Result<(FlowModel<S>, Option<ConditionalFlowModel<S>>)> {
        let n = cfg.dataset.dim();
        let image = cfg.dataset.image_shape();
        let pa = FlowArch::glow(n, cfg.prior_steps(), cfg.model.prior.hidden, image)
            .with_activation(cfg.model.prior.activation);
        let prior = FlowModel::new(pa, "prior", cfg.seed)?;
        if cfg.mode == Mode::Conventional {
            return Ok((prior, None));
        }
        let ps = &cfg.model.posterior;
        let meas = MeasurementModel::<f64>::new(cfg.measurement.clone().expect("validated"))?;
        let pyramid = match ps.conditioner {
            ConditionerKind::Pyramid => true,
            ConditionerKind::Mlp => false,
            ConditionerKind::Auto => image.is_some(),
        };
        let conditioner = match (pyramid, image) {
            (true, Some((h, w))) => ConditionerSpec::Pyramid {
                height: h,
                width: w,
                hidden: ps.conditioner_hidden,
            },
            _ => ConditionerSpec::Mlp {
                input: meas.output_dim(),
                hidden: ps.conditioner_hidden,
            },
        };
        let arch = ConditionalArch {
            flow: FlowArch::glow(n, cfg.posterior_steps(), ps.hidden, image)
                .with_activation(ps.activation)
                .with_cond_dim(ps.features),
            conditioner,
        };
        let post = ConditionalFlowModel::new(arch, "post", cfg.seed.wrapping_add(1))?;
        Ok((prior, Some(post)))
    }

    /// Fresh models with data-dependent actnorm initialization. In ambient
    /// mode only measurements are read (the prior is initialized on their
    /// back-projection `H^T g`).
    pub fn new(cfg: ExperimentConfig, data: &Dataset<S>) -> Result<Self> {
        cfg.validate()?;
        let (mut prior, mut post) = Self::build_models(&cfg)?;
        let model = match (&cfg.measurement, cfg.mode) {
            (Some(m), Mode::Ambient) => Some(MeasurementModel::new(m.clone())?),
            _ => None,
        };
        let sparsity = cfg.sparsity.clone().map(SparsityModel::new).transpose()?;
        let rows = cfg.training.init_rows.min(data.len());
        let mut r = RngStream::new(cfg.seed, "train/init");
        let idx: Vec<usize> = (0..rows).map(|_| r.below(data.len())).collect();
        match (cfg.mode, &mut post, &model) {
            (Mode::Conventional, _, _) => {
                let x = sampled_rows(data.objects()?, &idx)?;
                prior.initialize_actnorm(&x, None)?;
            }
            (Mode::Ambient, Some(post), Some(model)) => {
                let g = sampled_rows(data.measurements()?, &idx)?;
                let back = model.adjoint(&g)?;
                prior.initialize_actnorm(&back, None)?;
                let cin = conditioner_input(post, model, &g)?;
                post.initialize_actnorm(&back, &cin)?;
            }
            _ => unreachable!("validated"),
        }
        let adam = Adam::new(cfg.optimizer)?;
        Ok(Self {
            cfg,
            prior,
            post,
            model,
            sparsity,
            adam,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &FlowModel<S> {
        &self.prior
    }

    pub fn posterior(&self) -> Option<&ConditionalFlowModel<S>> {
        self.post.as_ref()
    }

    pub fn measurement_model(&self) -> Option<&MeasurementModel<S>> {
        self.model.as_ref()
    }

    pub fn sparsity_model(&self) -> Option<&SparsityModel<S>> {
        self.sparsity.as_ref()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricRow] {
        &self.history
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// One optimizer step on a fresh batch. On a numeric failure the
    /// parameters are left as they were before the step.
    pub fn step(&mut self, data: &Dataset<S>) -> Result<MetricRow> {
        let b = self.cfg.training.batch_size;
        let mut r = self.batch_stream().at(self.step);
        let idx: Vec<usize> = (0..b).map(|_| r.below(data.len())).collect();
        let mut g = Graph::new();
        let mut row = MetricRow {
            step: self.step + 1,
            ..MetricRow::default()
        };
        let loss = match self.cfg.mode {
            Mode::Conventional => {
                let mut batch = sampled_rows(data.objects()?, &idx)?;
                let jitter = self.cfg.training.dequantize;
                if jitter > 0.0 {
                    let noise = r.normals::<f64>(batch.len());
                    for (v, e) in batch.data_mut().iter_mut().zip(noise) {
                        *v = *v + S::of(jitter * e);
                    }
                }
                let x = g.constant(batch);
                nll_var(&mut g, &self.prior, x)?
            }
            Mode::Ambient => {
                let post = self.post.as_ref().expect("ambient");
                let model = self.model.as_ref().expect("ambient");
                let meas = sampled_rows(data.measurements()?, &idx)?;
                let zs = RngStream::new(self.cfg.seed, &format!("train/zeta/{}", self.step));
                let zeta = draw_latents(b, self.cfg.objective.m, post.dim(), &zs, 0);
                let e = ambient_objective_var(
                    &mut g,
                    &self.prior,
                    post,
                    model,
                    self.sparsity.as_ref(),
                    &meas,
                    &zeta,
                    &self.cfg.objective,
                )?;
                let t = e.means(&g);
                row.log_prior = t.log_prior;
                row.log_noise = t.log_noise;
                row.log_post = t.log_post;
                row.penalty = t.penalty;
                g.neg(e.objective)?
            }
        };
        row.loss = g.item(loss).as_f64();
        if !row.loss.is_finite() {
            return Err(Error::numeric("loss", "non-finite loss"));
        }
        let grads = g.backward(loss)?;
        let info = match &mut self.post {
            Some(post) => self.adam.step(&mut [self.prior.params_mut(), post.params_mut()], &grads)?,
            None => self.adam.step(&mut [self.prior.params_mut()], &grads)?,
        };
        row.grad_norm = info.grad_norm;
        self.step += 1;
        Ok(row)
    }

    /// Runs `steps` more steps, recording metrics and writing checkpoints to
    /// `out` when given. A numeric failure checkpoints the last good state
    /// and returns a divergence error.
    pub fn run(&mut self, data: &Dataset<S>, steps: u64, out: Option<&Path>) -> Result<()> {
        let end = self.step + steps;
        let t = &self.cfg.training;
        let (log_every, ckpt_every) = (t.log_every, t.checkpoint_every);
        while self.step < end {
            let backup = self.snapshot();
            match self.step(data) {
                Ok(row) => {
                    if row.step % log_every == 0 || row.step == end {
                        self.history.push(row);
                    }
                    if let Some(dir) = out {
                        if ckpt_every > 0 && row.step % ckpt_every == 0 && row.step != end {
                            self.save(dir)?;
                        }
                    }
                }
                Err(e @ (Error::Numeric { .. } | Error::Divergence { .. })) => {
                    self.restore(backup);
                    if let Some(dir) = out {
                        self.save(dir)?;
                    }
                    return Err(Error::Divergence {
                        step: self.step + 1,
                        detail: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> (ParameterStore<S>, Option<ParameterStore<S>>, Adam) {
        (
            self.prior.params().clone(),
            self.post.as_ref().map(|p| p.params().clone()),
            self.adam.clone(),
        )
    }

    fn restore(&mut self, s: (ParameterStore<S>, Option<ParameterStore<S>>, Adam)) {
        *self.prior.params_mut() = s.0;
        if let (Some(post), Some(p)) = (&mut self.post, s.1) {
            *post.params_mut() = p;
        }
        self.adam = s.2;
    }

    /// Writes config, models, optimizer state, metrics and stream cursors.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        save_flow(&dir.join("prior"), &self.prior)?;
        if let Some(post) = &self.post {
            save_conditional(&dir.join("posterior"), post)?;
        }
        self.adam.save(&dir.join("optimizer"))?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        let state = TrainState {
            step: self.step,
            cursors: vec![
                self.batch_stream().at(self.step).cursor(),
                RngStream::new(self.cfg.seed, &format!("train/zeta/{}", self.step)).cursor(),
            ],
        };
        std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    /// Reloads a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::Ingest {
                file: p,
                detail: e.to_string(),
            })
        };
        let cfg = ExperimentConfig::from_json(&read("config.json")?)?;
        let state: TrainState = serde_json::from_str(&read("state.json")?)?;
        let prior = load_flow(&dir.join("prior"))?;
        let post = if cfg.mode == Mode::Ambient {
            Some(load_conditional(&dir.join("posterior"))?)
        } else {
            None
        };
        let model = match (&cfg.measurement, cfg.mode) {
            (Some(m), Mode::Ambient) => Some(MeasurementModel::new(m.clone())?),
            _ => None,
        };
        let sparsity = cfg.sparsity.clone().map(SparsityModel::new).transpose()?;
        let adam = Adam::load(&dir.join("optimizer"))?;
        let mut history = Vec::new();
        let mut rd = csv::Reader::from_path(dir.join("metrics.csv"))?;
        for r in rd.deserialize() {
            history.push(r?);
        }
        Ok(Self {
            cfg,
            prior,
            post,
            model,
            sparsity,
            adam,
            step: state.step,
            history,
        })
    }
}

/// Builds the dataset and trains for the configured number of steps,
/// checkpointing into `out` when given.
pub fn train<S: Scalar>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(Trainer<S>, Dataset<S>)> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    let mut t = Trainer::new(cfg.clone(), &data)?;
    t.run(&data, cfg.training.steps, out)?;
    Ok((t, data))
}
