use serde::{Deserialize, Serialize};

use super::mlp::{self, Activation};
use super::model::{as_batch, std_normal_log_density, FlowArch, FlowModel};
use crate::diff::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Feature extractor applied to the measurement before it reaches the
/// coupling networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConditionerSpec {
    /// Two-layer perceptron on a measurement vector of width `input`.
    Mlp { input: usize, hidden: usize },
    /// Image input `[height, width]`: the image, its 2x and 4x average
    /// pooled versions, then a two-layer perceptron.
    Pyramid { height: usize, width: usize, hidden: usize },
}

impl ConditionerSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            ConditionerSpec::Mlp { input, .. } => *input,
            ConditionerSpec::Pyramid { height, width, .. } => height * width,
        }
    }

    fn hidden(&self) -> usize {
        match self {
            ConditionerSpec::Mlp { hidden, .. } | ConditionerSpec::Pyramid { hidden, .. } => *hidden,
        }
    }

    fn stack_dim(&self) -> usize {
        match self {
            ConditionerSpec::Mlp { input, .. } => *input,
            ConditionerSpec::Pyramid { height, width, .. } => pyramid_levels(*height, *width)
                .iter()
                .map(|(h, w)| h * w)
                .sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.hidden() == 0 {
            return Err(Error::config("conditioner sizes must be positive"));
        }
        Ok(())
    }
}

/// Resolutions of the pyramid: halve while both sides stay even, at most twice.
fn pyramid_levels(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(h, w)];
    let (mut a, mut b) = (h, w);
    for _ in 0..2 {
        if a % 2 != 0 || b % 2 != 0 || a < 2 || b < 2 {
            break;
        }
        a /= 2;
        b /= 2;
        out.push((a, b));
    }
    out
}

/// `[h*w, h*w/4]` matrix averaging 2x2 blocks.
fn pool_matrix<S: Scalar>(h: usize, w: usize) -> Tensor<S> {
    let (h2, w2) = (h / 2, w / 2);
    let mut m = vec![S::zero(); h * w * h2 * w2];
    for y in 0..h {
        for x in 0..w {
            let o = (y / 2) * w2 + x / 2;
            m[(y * w + x) * h2 * w2 + o] = S::of(0.25);
        }
    }
    Tensor::new(vec![h * w, h2 * w2], m).expect("pool shape")
}

/// Architecture of a conditional flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalArch {
    pub flow: FlowArch,
    pub conditioner: ConditionerSpec,
}

/// Conditional flow `f = h(ζ; g)`, `ζ ~ N(0, I_n)`: a flow whose coupling
/// networks also see features extracted from the measurement `g`.
#[derive(Clone, Debug)]
pub struct ConditionalFlowModel<S> {
    conditioner: ConditionerSpec,
    flow: FlowModel<S>,
}

impl<S: Scalar> ConditionalFlowModel<S> {
    /// `flow.cond_dim` is the feature width; it must be positive.
    pub fn new(arch: ConditionalArch, name: &str, seed: u64) -> Result<Self> {
        if arch.flow.cond_dim == 0 {
            return Err(Error::config("conditional flow needs cond_dim > 0"));
        }
        arch.conditioner.validate()?;
        let mut flow = FlowModel::new(arch.flow, name, seed)?;
        let sizes = [
            arch.conditioner.stack_dim(),
            arch.conditioner.hidden(),
            flow.arch().cond_dim,
        ];
        let mut rng = RngStream::new(seed, &format!("flow/init/{name}/cond"));
        mlp::init(flow.params_mut(), &format!("{name}.cond"), &sizes, &mut rng, false)?;
        Ok(Self {
            conditioner: arch.conditioner,
            flow,
        })
    }

    pub fn from_parts(arch: ConditionalArch, name: &str, params: ParameterStore<S>) -> Result<Self> {
        let fresh = Self::new(arch, name, params.seed())?;
        if fresh.params().names() != params.names() {
            return Err(Error::config("parameter set does not match architecture"));
        }
        for (n, t) in fresh.params().iter() {
            if params.get(n).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::config(format!("parameter '{n}' has the wrong shape")));
            }
        }
        let mut out = fresh;
        *out.flow.params_mut() = params;
        Ok(out)
    }

    pub fn arch(&self) -> ConditionalArch {
        ConditionalArch {
            flow: self.flow.arch().clone(),
            conditioner: self.conditioner.clone(),
        }
    }

    pub fn name(&self) -> &str {
        self.flow.name()
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn cond_input_dim(&self) -> usize {
        self.conditioner.input_dim()
    }

    pub fn params(&self) -> &ParameterStore<S> {
        self.flow.params()
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<S> {
        self.flow.params_mut()
    }

    /// Conditioning features `[B, cond_dim]` of `g: [B, m]`.
    pub fn features_var(&self, g: &mut Graph<S>, meas: Var) -> Result<Var> {
        let m = self.conditioner.input_dim();
        let s = g.shape(meas);
        if s.len() != 2 || s[1] != m {
            return Err(Error::config(format!(
                "conditioning input must be [B, {m}], got {s:?}"
            )));
        }
        let stack = match &self.conditioner {
            ConditionerSpec::Mlp { .. } => meas,
            ConditionerSpec::Pyramid { height, width, .. } => {
                let levels = pyramid_levels(*height, *width);
                let mut parts = vec![meas];
                let mut cur = meas;
                for win in levels.windows(2) {
                    let (h, w) = win[0];
                    let p = g.constant(pool_matrix(h, w));
                    cur = g.matmul(cur, p)?;
                    parts.push(cur);
                }
                if parts.len() == 1 {
                    meas
                } else {
                    g.concat(&parts, 1)?
                }
            }
        };
        let prefix = format!("{}.cond", self.flow.name());
        mlp::forward(g, self.flow.params(), &prefix, 2, Activation::Tanh, stack)
            .map_err(|e| e.context("conditioner"))
    }

    /// `f = h(ζ; g)` and `log|det dh/dζ|` per row.
    pub fn cond_forward_var(&self, g: &mut Graph<S>, zeta: Var, meas: Var) -> Result<(Var, Var)> {
        let c = self.features_var(g, meas)?;
        self.flow.forward_var(g, zeta, Some(c))
    }

    pub fn cond_inverse_var(&self, g: &mut Graph<S>, f: Var, meas: Var) -> Result<(Var, Var)> {
        let c = self.features_var(g, meas)?;
        self.flow.inverse_var(g, f, Some(c))
    }

    /// `log p(f | g)` per row.
    pub fn cond_log_prob_var(&self, g: &mut Graph<S>, f: Var, meas: Var) -> Result<Var> {
        let (z, ld) = self.cond_inverse_var(g, f, meas)?;
        let lq = std_normal_log_density(g, z)?;
        g.add(lq, ld)
    }

    /// Forward pass with features already computed (reused across samples).
    pub fn forward_with_features(&self, g: &mut Graph<S>, zeta: Var, feats: Var) -> Result<(Var, Var)> {
        self.flow.forward_var(g, zeta, Some(feats))
    }

    pub fn log_prob_with_features(&self, g: &mut Graph<S>, f: Var, feats: Var) -> Result<Var> {
        self.flow.log_prob_var(g, f, Some(feats))
    }

    fn pair(&self, x: &Tensor<S>, meas: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let x = as_batch(x, self.dim(), "conditional flow")?;
        let m = as_batch(meas, self.cond_input_dim(), "conditioning input")?;
        let m = if m.rows() == x.rows() {
            m
        } else if m.rows() == 1 {
            let rows: Vec<Vec<S>> = (0..x.rows()).map(|_| m.row(0).to_vec()).collect();
            Tensor::stack_rows(&rows)?
        } else {
            return Err(Error::config(format!(
                "{} conditioning rows for {} inputs",
                m.rows(),
                x.rows()
            )));
        };
        Ok((x, m))
    }

    fn eager(&self, x: &Tensor<S>, meas: &Tensor<S>, inverse: bool) -> Result<(Tensor<S>, Vec<S>)> {
        let (xb, mb) = self.pair(x, meas)?;
        let mut g = Graph::no_grad();
        let (xv, mv) = (g.constant(xb), g.constant(mb));
        let (out, ld) = if inverse {
            self.cond_inverse_var(&mut g, xv, mv)?
        } else {
            self.cond_forward_var(&mut g, xv, mv)?
        };
        let mut t = g.tensor(out);
        if x.rank() == 1 {
            t = t.reshape(vec![self.dim()])?;
        }
        Ok((t, g.value(ld).to_vec()))
    }

    /// Eager `h(ζ; g)`; a single `g` row is shared by every `ζ` row.
    pub fn cond_forward(&self, zeta: &Tensor<S>, meas: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        self.eager(zeta, meas, false)
    }

    pub fn cond_inverse(&self, f: &Tensor<S>, meas: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        self.eager(f, meas, true)
    }

    pub fn cond_log_prob(&self, f: &Tensor<S>, meas: &Tensor<S>) -> Result<Vec<S>> {
        let (fb, mb) = self.pair(f, meas)?;
        let mut g = Graph::no_grad();
        let (fv, mv) = (g.constant(fb), g.constant(mb));
        let lp = self.cond_log_prob_var(&mut g, fv, mv)?;
        Ok(g.value(lp).to_vec())
    }

    /// `count` posterior draws for one measurement `g`.
    pub fn sample(&self, meas: &Tensor<S>, count: usize, stream: &RngStream) -> Result<Tensor<S>> {
        if count == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let z = super::model::latent_batch(count, self.dim(), stream, 0);
        Ok(self.cond_forward(&z, meas)?.0)
    }

    pub fn initialize_actnorm(&mut self, data: &Tensor<S>, meas: &Tensor<S>) -> Result<()> {
        let (xb, mb) = self.pair(data, meas)?;
        let mut g = Graph::no_grad();
        let mv = g.constant(mb);
        let feats = self.features_var(&mut g, mv)?;
        let feats = g.tensor(feats);
        self.flow.initialize_actnorm(&xb, Some(&feats))
    }
}
