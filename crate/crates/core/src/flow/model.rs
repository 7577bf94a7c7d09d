use serde::{Deserialize, Serialize};

use super::blocks::{self, BlockSpec, CouplingNet};
use super::mlp::Activation;
use crate::diff::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_CLAMP: f64 = 1.9;

/// Architecture of a flow: everything needed to rebuild it except the
/// trained parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub clamp: f64,
    /// Width of the conditioning features fed to every coupling network.
    #[serde(default)]
    pub cond_dim: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Number of coupling steps used for an `n`-dimensional signal.
pub fn default_steps(n: usize) -> usize {
    let log2 = usize::BITS - (n.max(1) - 1).leading_zeros();
    8.max(2 * log2 as usize)
}

impl FlowArch {
    /// `steps` repetitions of actnorm, mix and coupling, with alternating
    /// coupling halves. When `image` is `Some((h, w))` with even sides the
    /// stack starts with a squeeze. A freshly initialized model of this
    /// architecture is the identity map.
    pub fn glow(dim: usize, steps: usize, hidden: usize, image: Option<(usize, usize)>) -> Self {
        let mut blocks = Vec::new();
        if let Some((h, w)) = image {
            if h * w == dim && h % 2 == 0 && w % 2 == 0 {
                blocks.push(BlockSpec::Squeeze {
                    channels: 1,
                    height: h,
                    width: w,
                });
            }
        }
        for i in 0..steps {
            blocks.push(BlockSpec::Actnorm);
            blocks.push(BlockSpec::Mix {
                perm: (0..dim).collect(),
            });
            blocks.push(BlockSpec::AffineCoupling { flip: i % 2 == 1 });
        }
        Self {
            dim,
            hidden,
            activation: Activation::Tanh,
            clamp: DEFAULT_CLAMP,
            cond_dim: 0,
            blocks,
        }
    }

    pub fn with_cond_dim(mut self, cond_dim: usize) -> Self {
        self.cond_dim = cond_dim;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("flow dim must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("flow needs at least one block"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::config("coupling clamp must be positive"));
        }
        if self.hidden == 0 && self.blocks.iter().any(|b| matches!(b, BlockSpec::AffineCoupling { .. })) {
            return Err(Error::config("coupling hidden width must be positive"));
        }
        self.blocks
            .iter()
            .enumerate()
            .try_for_each(|(i, b)| blocks::validate(b, self.dim).map_err(|e| prefix_config(e, i)))
    }

    pub(crate) fn net(&self) -> CouplingNet {
        CouplingNet {
            hidden: self.hidden,
            activation: self.activation,
            clamp: self.clamp,
            cond_dim: self.cond_dim,
        }
    }
}

fn prefix_config(e: Error, block: usize) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("block {block}: {m}")),
        other => other,
    }
}

/// `log N(z; 0, I)` per row of `z: [B, n]`.
pub(crate) fn std_normal_log_density<S: Scalar>(g: &mut Graph<S>, z: Var) -> Result<Var> {
    let n = g.shape(z)[1];
    let sq = g.square(z)?;
    let ss = g.sum_axis(sq, 1)?;
    let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    g.affine(ss, S::of(-0.5), S::of(c))
}

/// Unconditional normalizing flow `x = G(z)`, `z ~ N(0, I_n)`.
#[derive(Clone, Debug)]
pub struct FlowModel<S> {
    arch: FlowArch,
    name: String,
    params: ParameterStore<S>,
}

/// Shapes a single vector `[n]` as a batch of one.
pub(crate) fn as_batch<S: Scalar>(x: &Tensor<S>, n: usize, what: &str) -> Result<Tensor<S>> {
    match x.shape() {
        [k] if *k == n => x.clone().reshape(vec![1, n]),
        [_, k] if *k == n => Ok(x.clone()),
        s => Err(Error::config(format!("{what}: expected [{n}] or [B, {n}], got {s:?}"))),
    }
}

impl<S: Scalar> FlowModel<S> {
    /// Initializes parameters deterministically from `seed`. Parameter
    /// names are prefixed with `name`.
    pub fn new(arch: FlowArch, name: &str, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParameterStore::new(seed);
        let net = arch.net();
        for (i, b) in arch.blocks.iter().enumerate() {
            let mut rng = RngStream::new(seed, &format!("flow/init/{name}")).at(i as u64);
            blocks::init_params(b, &format!("{name}.b{i}"), arch.dim, net, &mut params, &mut rng)?;
        }
        Ok(Self {
            arch,
            name: name.to_string(),
            params,
        })
    }

    /// Rebuilds a model from an architecture and matching parameters.
    pub fn from_parts(arch: FlowArch, name: &str, params: ParameterStore<S>) -> Result<Self> {
        let fresh = Self::new(arch, name, params.seed())?;
        let want = fresh.params.names();
        if want != params.names() {
            return Err(Error::config(format!(
                "parameter set does not match architecture (expected {} tensors named {:?}..., got {:?}...)",
                want.len(),
                want.first(),
                params.names().first()
            )));
        }
        for (name, t) in fresh.params.iter() {
            if params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::config(format!("parameter '{name}' has the wrong shape")));
            }
        }
        Ok(Self {
            arch: fresh.arch,
            name: fresh.name,
            params,
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn params(&self) -> &ParameterStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.params
    }

    fn check_input(&self, g: &Graph<S>, x: Var, cond: Option<Var>) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.arch.dim {
            return Err(Error::config(format!(
                "flow input must be [B, {}], got {s:?}",
                self.arch.dim
            )));
        }
        let b = s[0];
        match (cond, self.arch.cond_dim) {
            (None, 0) => Ok(b),
            (Some(c), w) if w > 0 => {
                let cs = g.shape(c);
                if cs != [b, w] {
                    return Err(Error::config(format!(
                        "conditioning features must be [{b}, {w}], got {cs:?}"
                    )));
                }
                Ok(b)
            }
            (None, w) => Err(Error::config(format!(
                "model expects {w} conditioning features, none given"
            ))),
            (Some(c), _) => Err(Error::config(format!(
                "unconditional model given conditioning features of shape {:?}",
                g.shape(c)
            ))),
        }
    }

    fn run(&self, g: &mut Graph<S>, x: Var, cond: Option<Var>, inverse: bool) -> Result<(Var, Var)> {
        let batch = self.check_input(g, x, cond)?;
        let net = self.arch.net();
        let mut h = x;
        let mut total: Option<Var> = None;
        let n = self.arch.blocks.len();
        for k in 0..n {
            let i = if inverse { n - 1 - k } else { k };
            let step = blocks::apply(
                &self.arch.blocks[i],
                &format!("{}.b{i}", self.name),
                self.arch.dim,
                net,
                g,
                &self.params,
                h,
                cond,
                inverse,
            )
            .map_err(|e| e.context(format_args!("block {i}")))?;
            h = step.out;
            if let Some(ld) = step.logdet {
                total = Some(match total {
                    None => ld,
                    Some(t) => g.add(t, ld).map_err(|e| e.context(format_args!("block {i}")))?,
                });
            }
        }
        let zeros = g.constant(Tensor::zeros(&[batch]));
        let logdet = match total {
            Some(t) => g.add(zeros, t)?,
            None => zeros,
        };
        Ok((h, logdet))
    }

    /// `x = G(z)` for `z: [B, n]`; returns `x` and `log|det dG/dz|` per row.
    pub fn forward_var(&self, g: &mut Graph<S>, z: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.run(g, z, cond, false)
    }

    /// `z = G^-1(x)`; returns `z` and `log|det dG^-1/dx|` per row.
    pub fn inverse_var(&self, g: &mut Graph<S>, x: Var, cond: Option<Var>) -> Result<(Var, Var)> {
        self.run(g, x, cond, true)
    }

    /// `log p(x)` per row.
    pub fn log_prob_var(&self, g: &mut Graph<S>, x: Var, cond: Option<Var>) -> Result<Var> {
        let (z, ld) = self.inverse_var(g, x, cond)?;
        let lq = std_normal_log_density(g, z)?;
        g.add(lq, ld)
    }

    /// Eager forward pass on `[n]` or `[B, n]`.
    pub fn forward(&self, z: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        self.eager(z, false)
    }

    pub fn inverse(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        self.eager(x, true)
    }

    fn eager(&self, x: &Tensor<S>, inverse: bool) -> Result<(Tensor<S>, Vec<S>)> {
        let batch = as_batch(x, self.arch.dim, "flow")?;
        let mut g = Graph::no_grad();
        let v = g.constant(batch);
        let (out, ld) = self.run(&mut g, v, None, inverse)?;
        let mut t = g.tensor(out);
        if x.rank() == 1 {
            t = t.reshape(vec![self.arch.dim])?;
        }
        Ok((t, g.value(ld).to_vec()))
    }

    pub fn log_prob(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        let batch = as_batch(x, self.arch.dim, "log_prob")?;
        let mut g = Graph::no_grad();
        let v = g.constant(batch);
        let lp = self.log_prob_var(&mut g, v, None)?;
        Ok(g.value(lp).to_vec())
    }

    /// `count` samples `G(z)`; row `i` uses latent draws from `stream.at(i)`.
    pub fn sample(&self, count: usize, stream: &RngStream) -> Result<Tensor<S>> {
        if count == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let z = latent_batch(count, self.arch.dim, stream, 0);
        Ok(self.forward(&z)?.0)
    }

    /// Data-dependent actnorm initialization: walks the blocks from the data
    /// side, setting each actnorm so that its inverse output has zero mean
    /// and unit variance per coordinate over `data`.
    pub fn initialize_actnorm(&mut self, data: &Tensor<S>, cond: Option<&Tensor<S>>) -> Result<()> {
        let mut h = as_batch(data, self.arch.dim, "actnorm init")?;
        let rows = h.rows();
        if rows < 2 {
            return Err(Error::config("actnorm init needs at least two rows"));
        }
        let net = self.arch.net();
        for i in (0..self.arch.blocks.len()).rev() {
            let prefix = format!("{}.b{i}", self.name);
            if self.arch.blocks[i] == BlockSpec::Actnorm {
                let n = self.arch.dim;
                let mut mean = vec![0.0; n];
                let mut var = vec![0.0; n];
                for r in 0..rows {
                    for (j, v) in h.row(r).iter().enumerate() {
                        mean[j] += v.as_f64() / rows as f64;
                    }
                }
                for r in 0..rows {
                    for (j, v) in h.row(r).iter().enumerate() {
                        var[j] += (v.as_f64() - mean[j]).powi(2) / rows as f64;
                    }
                }
                let ls: Vec<S> = var.iter().map(|v| S::of(0.5 * v.max(1e-12).ln())).collect();
                let sh: Vec<S> = mean.iter().map(|&m| S::of(m)).collect();
                self.params.set(&format!("{prefix}.log_scale"), &ls)?;
                self.params.set(&format!("{prefix}.shift"), &sh)?;
            }
            let mut g = Graph::no_grad();
            let v = g.constant(h);
            let c = cond.map(|c| g.constant(c.clone()));
            let step = blocks::apply(
                &self.arch.blocks[i],
                &prefix,
                self.arch.dim,
                net,
                &mut g,
                &self.params,
                v,
                c,
                true,
            )
            .map_err(|e| e.context(format_args!("block {i}")))?;
            h = g.tensor(step.out);
        }
        Ok(())
    }
}

/// Standard normal latents `[count, dim]`; row `i` drawn from
/// `stream.at(first + i)`.
pub fn latent_batch<S: Scalar>(count: usize, dim: usize, stream: &RngStream, first: u64) -> Tensor<S> {
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count {
        data.extend(stream.at(first + i as u64).normals::<S>(dim));
    }
    Tensor::new(vec![count, dim], data).expect("latent shape")
}
