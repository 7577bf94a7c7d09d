//! Shared fixtures for unit tests.

use nalgebra::{DMatrix, DVector};

use crate::diff::{ParameterStore, Tensor};
use crate::flow::{Activation, BlockSpec, ConditionalArch, ConditionalFlowModel, ConditionerSpec, FlowArch, FlowModel};
use crate::imaging::{MeasurementModel, NoiseModel};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian `x = A z + b` as a mix block (lower-triangular `A`) then a shift.
pub fn gaussian_arch(dim: usize) -> FlowArch {
    FlowArch {
        dim,
        hidden: 2,
        activation: Activation::Tanh,
        clamp: 1.9,
        cond_dim: 0,
        blocks: vec![
            BlockSpec::Mix {
                perm: (0..dim).collect(),
            },
            BlockSpec::Actnorm,
        ],
    }
}

pub fn set_gaussian(store: &mut ParameterStore<f64>, prefix: &str, chol: &DMatrix<f64>, mean: &[f64]) {
    let n = chol.nrows();
    let mut lower = vec![0.0; n * n];
    let mut log_diag = vec![0.0; n];
    for i in 0..n {
        log_diag[i] = chol[(i, i)].ln();
        for j in 0..i {
            lower[i * n + j] = chol[(i, j)] / chol[(j, j)];
        }
    }
    store.set(&format!("{prefix}.b0.lower"), &lower).unwrap();
    store.set(&format!("{prefix}.b0.log_diag"), &log_diag).unwrap();
    store.set(&format!("{prefix}.b1.shift"), mean).unwrap();
}

pub struct LinearGaussian {
    pub prior: FlowModel<f64>,
    pub post: ConditionalFlowModel<f64>,
    pub model: MeasurementModel<f64>,
    pub meas: Tensor<f64>,
    pub log_evidence: f64,
    /// Exact posterior moments of `meas`.
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
}

/// Gaussian prior, dense `H`, Gaussian noise, and a posterior network set to
/// the exact posterior of one measurement.
pub fn linear_gaussian(perturb: f64) -> LinearGaussian {
    let (n, m, sigma) = (2, 3, 0.4);
    let a0 = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.5, 0.8]);
    let b0 = DVector::from_row_slice(&[0.3, -0.7]);
    let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 0.8, 0.6, 0.2]);
    let g = DVector::from_row_slice(&[0.9, -0.4, 0.5]);
    let s0 = &a0 * a0.transpose();
    let sg = &h * &s0 * h.transpose() + DMatrix::identity(m, m) * sigma * sigma;
    let r = &g - &h * &b0;
    let sg_chol = sg.clone().cholesky().unwrap();
    let logdet: f64 = 2.0 * sg_chol.l().diagonal().iter().map(|v: &f64| v.ln()).sum::<f64>();
    let quad = r.dot(&sg_chol.solve(&r));
    let log_evidence = -0.5 * (quad + logdet + m as f64 * LN_2PI);

    let s0_inv = s0.clone().try_inverse().unwrap();
    let sp = (&s0_inv + h.transpose() * &h / (sigma * sigma)).try_inverse().unwrap();
    let mp = &sp * (&s0_inv * &b0 + h.transpose() * &g / (sigma * sigma));
    let sp_cov = sp.clone();
    let mut pc = sp.cholesky().unwrap().l();
    pc *= 1.0 + perturb;

    let mut prior = FlowModel::new(gaussian_arch(n), "prior", 0).unwrap();
    set_gaussian(prior.params_mut(), "prior", &a0, b0.as_slice());
    let arch = ConditionalArch {
        flow: gaussian_arch(n).with_cond_dim(1),
        conditioner: ConditionerSpec::Mlp { input: m, hidden: 2 },
    };
    let mut post = ConditionalFlowModel::new(arch, "post", 0).unwrap();
    let shifted: Vec<f64> = mp.iter().map(|v| v + perturb).collect();
    set_gaussian(post.params_mut(), "post", &pc, &shifted);
    let hm = Tensor::new(vec![m, n], h.transpose().as_slice().to_vec()).unwrap();
    LinearGaussian {
        prior,
        post,
        model: MeasurementModel::dense(&hm, NoiseModel::gaussian(sigma)).unwrap(),
        meas: Tensor::new(vec![1, m], g.as_slice().to_vec()).unwrap(),
        log_evidence,
        post_mean: mp,
        post_cov: sp_cov,
    }
}


pub fn randomize(store: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut rng = crate::rng::RngStream::new(seed, "testkit/randomize");
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

/// Glow-style flow with small random weights.
pub fn random_flow(dim: usize, steps: usize, seed: u64, scale: f64) -> FlowModel<f64> {
    let mut m = FlowModel::new(FlowArch::glow(dim, steps, 8, None), "prior", seed).unwrap();
    randomize(m.params_mut(), seed, scale);
    m
}
