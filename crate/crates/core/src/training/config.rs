use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::dataset::{PiecewiseSpec, ToyMixtureSpec};
use crate::error::{Error, Result};
use crate::flow::{default_steps, Activation, DEFAULT_HIDDEN};
use crate::imaging::{MeasurementSpec, OperatorSpec, SparsitySpec};
use crate::objectives::ObjectiveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Maximum likelihood on clean objects.
    Conventional,
    /// Joint prior and posterior training from measurements only.
    Ambient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    #[serde(rename = "toy2d-octagon")]
    Toy2dOctagon {
        size: usize,
        #[serde(default = "radius")]
        radius: f64,
        #[serde(default = "sigma_f")]
        sigma_f: f64,
    },
    #[serde(rename = "piecewise-image")]
    PiecewiseImage {
        size: usize,
        #[serde(default = "one")]
        height: usize,
        width: usize,
        jumps: usize,
    },
    #[serde(rename = "tensor-directory")]
    TensorDirectory { path: PathBuf, shape: Vec<usize> },
}

fn radius() -> f64 {
    1.0
}
fn sigma_f() -> f64 {
    0.15
}
fn one() -> usize {
    1
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Toy2dOctagon { .. } => 2,
            DatasetSpec::PiecewiseImage { height, width, .. } => height * width,
            DatasetSpec::TensorDirectory { shape, .. } => shape.iter().product(),
        }
    }

    /// `(h, w)` when objects are images.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSpec::PiecewiseImage { height, width, .. } if *height > 1 => Some((*height, *width)),
            DatasetSpec::TensorDirectory { shape, .. } if shape.len() == 2 => Some((shape[0], shape[1])),
            _ => None,
        }
    }

    pub fn toy(&self, sigma_n: f64) -> Option<ToyMixtureSpec> {
        match self {
            DatasetSpec::Toy2dOctagon { radius, sigma_f, .. } => Some(ToyMixtureSpec {
                radius: *radius,
                sigma_f: *sigma_f,
                sigma_n,
            }),
            _ => None,
        }
    }

    pub fn piecewise(&self) -> Option<PiecewiseSpec> {
        match self {
            DatasetSpec::PiecewiseImage {
                height,
                width,
                jumps,
                ..
            } => Some(PiecewiseSpec {
                height: *height,
                width: *width,
                jumps: *jumps,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    /// Coupling steps; defaults to a logarithmic function of the dimension.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "hidden")]
    pub hidden: usize,
    #[serde(default = "act")]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionerKind {
    /// Pyramid for image objects, perceptron otherwise.
    Auto,
    Mlp,
    Pyramid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorSpec {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "hidden")]
    pub hidden: usize,
    #[serde(default = "act")]
    pub activation: Activation,
    /// Width of the conditioning features.
    #[serde(default = "features")]
    pub features: usize,
    #[serde(default = "hidden")]
    pub conditioner_hidden: usize,
    #[serde(default = "auto")]
    pub conditioner: ConditionerKind,
}

fn hidden() -> usize {
    DEFAULT_HIDDEN
}
fn act() -> Activation {
    Activation::Tanh
}
fn features() -> usize {
    16
}
fn auto() -> ConditionerKind {
    ConditionerKind::Auto
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            steps: None,
            hidden: hidden(),
            activation: act(),
        }
    }
}

impl Default for PosteriorSpec {
    fn default() -> Self {
        Self {
            steps: None,
            hidden: hidden(),
            activation: act(),
            features: features(),
            conditioner_hidden: hidden(),
            conditioner: auto(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub posterior: PosteriorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default = "steps")]
    pub steps: u64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    /// Metric rows are recorded every this many steps (and at the last step).
    #[serde(default = "log_every")]
    pub log_every: u64,
    /// Intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Rows used for the data-dependent actnorm initialization.
    #[serde(default = "init_rows")]
    pub init_rows: usize,
    /// Std of Gaussian jitter added to each conventional training batch.
    /// Degenerate data such as piecewise-constant images otherwise drive the
    /// density towards a singular one.
    #[serde(default)]
    pub dequantize: f64,
}

fn steps() -> u64 {
    20_000
}
fn batch() -> usize {
    256
}
fn log_every() -> u64 {
    100
}
fn init_rows() -> usize {
    1024
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            steps: steps(),
            batch_size: batch(),
            log_every: log_every(),
            checkpoint_every: 0,
            init_rows: init_rows(),
            dequantize: 0.0,
        }
    }
}

/// Declarative description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub measurement: Option<MeasurementSpec>,
    #[serde(default)]
    pub sparsity: Option<SparsitySpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub training: TrainingSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prior_steps(&self) -> usize {
        self.model.prior.steps.unwrap_or_else(|| default_steps(self.dataset.dim()))
    }

    pub fn posterior_steps(&self) -> usize {
        self.model
            .posterior
            .steps
            .unwrap_or_else(|| default_steps(self.dataset.dim()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dataset.dim();
        if n < 2 {
            return Err(Error::config("objects need at least two dimensions"));
        }
        match &self.dataset {
            DatasetSpec::Toy2dOctagon { size, radius, sigma_f } => {
                if *size == 0 || *radius <= 0.0 || *sigma_f <= 0.0 {
                    return Err(Error::config("toy dataset needs size, radius, sigma_f > 0"));
                }
            }
            DatasetSpec::PiecewiseImage { size, .. } => {
                if *size == 0 {
                    return Err(Error::config("dataset size must be positive"));
                }
                self.dataset.piecewise().expect("piecewise").validate()?;
            }
            DatasetSpec::TensorDirectory { shape, .. } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::config("tensor-directory shape must be non-empty and positive"));
                }
            }
        }
        if self.mode == Mode::Ambient {
            let Some(m) = &self.measurement else {
                return Err(Error::config("ambient mode needs a measurement model"));
            };
            let probe = crate::imaging::MeasurementModel::<f64>::new(m.clone())?;
            if probe.input_dim() != n {
                return Err(Error::config(format!(
                    "measurement operator takes {} values, objects have {n}",
                    probe.input_dim()
                )));
            }
            if !(m.noise.sigma > 0.0) {
                return Err(Error::config("ambient mode needs noise sigma > 0"));
            }
            if matches!(self.dataset, DatasetSpec::Toy2dOctagon { .. })
                && !matches!(m.operator, OperatorSpec::Identity { .. })
            {
                return Err(Error::config("the toy dataset is measured through the identity operator"));
            }
        }
        if let Some(s) = &self.sparsity {
            let sm = crate::imaging::SparsityModel::<f64>::new(s.clone())?;
            if sm.signal_dim() != n {
                return Err(Error::config(format!(
                    "sparsity transform acts on {} values, objects have {n}",
                    sm.signal_dim()
                )));
            }
        }
        self.objective.validate()?;
        if self.objective.mu > 0.0 && self.sparsity.is_none() {
            return Err(Error::config("objective.mu > 0 needs a sparsity model"));
        }
        self.optimizer.validate()?;
        if self.training.batch_size == 0 || self.training.log_every == 0 || self.training.init_rows < 2 {
            return Err(Error::config("training needs batch_size >= 1, log_every >= 1, init_rows >= 2"));
        }
        if !(self.training.dequantize >= 0.0 && self.training.dequantize.is_finite()) {
            return Err(Error::config("training.dequantize must be a finite, non-negative std"));
        }
        if self.model.prior.hidden == 0
            || self.model.posterior.hidden == 0
            || self.model.posterior.features == 0
            || self.model.posterior.conditioner_hidden == 0
        {
            return Err(Error::config("model widths must be positive"));
        }
        if self.model.posterior.conditioner == ConditionerKind::Pyramid && self.dataset.image_shape().is_none() {
            return Err(Error::config("the pyramid conditioner needs image objects"));
        }
        Ok(())
    }
}
