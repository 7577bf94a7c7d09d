use serde::{Deserialize, Serialize};

use crate::diff::{Graph, ParameterStore, Tensor, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Hidden-layer nonlinearity of the coupling and conditioner networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Softplus,
}

impl Activation {
    pub(crate) fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::LeakyRelu => g.leaky_relu(x, S::of(0.01)),
            Activation::Softplus => g.softplus(x),
        }
    }
}

/// Registers `{prefix}.l{i}.w` ([in, out]) and `{prefix}.l{i}.b` ([out]).
pub(crate) fn init<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    sizes: &[usize],
    rng: &mut RngStream,
    zero_last: bool,
) -> Result<()> {
    let layers = sizes.len() - 1;
    for i in 0..layers {
        let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
        let w = if zero_last && i + 1 == layers {
            vec![S::zero(); fan_in * fan_out]
        } else {
            let std = (1.0 / fan_in as f64).sqrt();
            rng.normals::<f64>(fan_in * fan_out)
                .into_iter()
                .map(|v| S::of(v * std))
                .collect()
        };
        store.insert(format!("{prefix}.l{i}.w"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        store.insert(format!("{prefix}.l{i}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// Applies the perceptron to `x: [B, sizes[0]]`; the last layer is linear.
pub(crate) fn forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    layers: usize,
    act: Activation,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        let w = g.param(store, &format!("{prefix}.l{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.l{i}.b"))?;
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        if i + 1 < layers {
            h = act.apply(g, h)?;
        }
    }
    Ok(h)
}
