//! Fixed small prior/posterior pair for bound-ordering checks.

use ambientflow::flow::{ConditionalArch, ConditionerSpec, FlowArch};
use ambientflow::imaging::MeasurementModel;
use ambientflow::objectives::ambient_bound_rows;
use ambientflow::{ConditionalFlowModel, FlowModel, ParameterStore, Result, RngStream, Tensor};
use serde::Serialize;

fn randomize(store: &mut ParameterStore, stream: &RngStream, scale: f64) {
    let mut rng = stream.clone();
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

pub struct ModelPair {
    pub prior: FlowModel,
    pub post: ConditionalFlowModel,
    pub model: MeasurementModel<f64>,
}

/// 2-D Glow prior and conditional posterior with random weights, measured
/// through the identity with noise 0.45.
pub fn fixed_pair(seed: u64) -> Result<ModelPair> {
    let root = RngStream::new(seed, "model-pair");
    let mut prior = FlowModel::new(FlowArch::glow(2, 2, 6, None), "prior", seed)?;
    randomize(prior.params_mut(), &root.split("prior"), 0.3);
    let arch = ConditionalArch {
        flow: FlowArch::glow(2, 2, 6, None).with_cond_dim(3),
        conditioner: ConditionerSpec::Mlp { input: 2, hidden: 5 },
    };
    let mut post = ConditionalFlowModel::new(arch, "post", seed)?;
    randomize(post.params_mut(), &root.split("post"), 0.3);
    Ok(ModelPair {
        prior,
        post,
        model: MeasurementModel::identity(2, 0.45)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub trial: usize,
    pub m: usize,
    pub mean: f64,
    /// Standard error of the mean over outer draws.
    pub se: f64,
}

/// Per trial, draws `draws` measurements `g = H f + n` with `f` from the
/// prior and estimates the bound for every `M` in `ms` on the same
/// measurements.
pub fn bound_ordering(
    pair: &ModelPair,
    ms: &[usize],
    draws: usize,
    trials: usize,
    stream: &RngStream,
) -> Result<Vec<BoundEstimate>> {
    let mut out = Vec::with_capacity(ms.len() * trials);
    for trial in 0..trials {
        let ts = stream.split(&format!("trial/{trial}"));
        let f = pair.prior.sample(draws, &ts.split("f"))?;
        let g: Tensor = pair.model.measure(&f, &ts.split("n"), 0)?;
        for &m in ms {
            let rows = ambient_bound_rows(&pair.prior, &pair.post, &pair.model, &g, m, &ts.split(&format!("m/{m}")))?;
            let n = rows.len() as f64;
            let mean = rows.iter().sum::<f64>() / n;
            let var = rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            out.push(BoundEstimate {
                trial,
                m,
                mean,
                se: (var / n).sqrt(),
            });
        }
    }
    Ok(out)
}

/// Trials where some larger `M` falls below a smaller one by more than
/// `z` combined standard errors.
pub fn ordering_violations(est: &[BoundEstimate], z: f64) -> Vec<usize> {
    let mut bad = Vec::new();
    let mut trials: Vec<usize> = est.iter().map(|e| e.trial).collect();
    trials.dedup();
    for t in trials {
        let mut rows: Vec<&BoundEstimate> = est.iter().filter(|e| e.trial == t).collect();
        rows.sort_by_key(|e| e.m);
        let violated = rows
            .windows(2)
            .any(|w| w[0].mean > w[1].mean + z * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt());
        if violated {
            bad.push(t);
        }
    }
    bad
}
