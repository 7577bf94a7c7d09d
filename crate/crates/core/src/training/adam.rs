use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{aftn, Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_b1")]
    pub beta1: f64,
    #[serde(default = "d_b2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup over this many steps.
    #[serde(default)]
    pub warmup: u64,
    /// Cosine decay to 1% of `lr` over this many steps after warmup; 0 keeps
    /// the rate constant.
    #[serde(default)]
    pub decay_steps: u64,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> Option<f64> {
    Some(50.0)
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            beta1: d_b1(),
            beta2: d_b2(),
            eps: d_eps(),
            clip_norm: d_clip(),
            warmup: 0,
            decay_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction and optional global-norm clipping. Moment
/// buffers are kept per parameter name, in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Summary of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Changes the base learning rate for subsequent steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Learning rate applied at update number `step` (1-based).
    pub fn rate(&self, step: u64) -> f64 {
        let (warm, decay) = (self.cfg.warmup, self.cfg.decay_steps);
        let mut lr = self.cfg.lr;
        if warm > 0 {
            lr *= (step as f64 / warm as f64).min(1.0);
        }
        if decay > 0 && step > warm {
            let p = ((step - warm) as f64 / decay as f64).min(1.0);
            lr *= 0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        }
        lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn slot(&mut self, name: &str, len: usize) -> Result<usize> {
        if let Some(i) = self.moments.iter().position(|(n, _, _)| n == name) {
            if self.moments[i].1.len() != len {
                return Err(Error::config(format!("moment buffer of '{name}' has the wrong size")));
            }
            return Ok(i);
        }
        self.moments.push((name.to_string(), vec![0.0; len], vec![0.0; len]));
        Ok(self.moments.len() - 1)
    }

    /// Descends along `grads` (the gradient of a loss to minimize) for every
    /// parameter of `stores`. Parameters the loss did not reach get a zero
    /// gradient.
    pub fn step<S: Scalar>(
        &mut self,
        stores: &mut [&mut ParameterStore<S>],
        grads: &Gradients<S>,
    ) -> Result<StepInfo> {
        let mut sq = 0.0;
        for store in stores.iter() {
            for (name, _) in store.iter() {
                if let Some(g) = grads.param(name) {
                    sq += g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
                }
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("adam", "non-finite gradient norm"));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powf(t), 1.0 - b2.powf(t));
        let lr = self.rate(self.step);
        for store in stores.iter_mut() {
            for name in store.names() {
                let len = store.get(&name).expect("listed").len();
                let i = self.slot(&name, len)?;
                let g = grads.param(&name);
                let (_, m, v) = &mut self.moments[i];
                let p = store.get_mut(&name).expect("listed").data_mut();
                for j in 0..len {
                    let gj = g.map(|g| g[j].as_f64() * scale).unwrap_or(0.0);
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                    p[j] = S::of(p[j].as_f64() - upd);
                }
            }
        }
        Ok(StepInfo {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }

    /// Writes `adam.json` plus one AFTN file per moment buffer.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("m"))?;
        std::fs::create_dir_all(dir.join("v"))?;
        let names: Vec<&str> = self.moments.iter().map(|(n, _, _)| n.as_str()).collect();
        let meta = serde_json::json!({ "config": self.cfg, "step": self.step, "names": names });
        std::fs::write(dir.join("adam.json"), serde_json::to_string_pretty(&meta)?)?;
        for (n, m, v) in &self.moments {
            aftn::write(&dir.join("m").join(format!("{n}.aftn")), &Tensor::from_vec(m.clone()))?;
            aftn::write(&dir.join("v").join(format!("{n}.aftn")), &Tensor::from_vec(v.clone()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("adam.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Ingest {
            file: path.clone(),
            detail: e.to_string(),
        })?;
        #[derive(Deserialize)]
        struct Meta {
            config: AdamConfig,
            step: u64,
            names: Vec<String>,
        }
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Ingest {
            file: path,
            detail: e.to_string(),
        })?;
        let mut moments = Vec::new();
        for n in meta.names {
            let m = aftn::read::<f64>(&dir.join("m").join(format!("{n}.aftn")))?.into_data();
            let v = aftn::read::<f64>(&dir.join("v").join(format!("{n}.aftn")))?.into_data();
            moments.push((n, m, v));
        }
        Ok(Self {
            cfg: meta.config,
            step: meta.step,
            moments,
        })
    }
}
