use super::checkpoint::{load_conditional, load_flow, save_conditional, save_flow};
use super::*;
use crate::diff::{Graph, ParameterStore, Tensor};
use crate::error::Error;
use crate::rng::RngStream;

fn randomize(store: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut rng = RngStream::new(seed, "flow-tests/randomize");
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

fn random_model(dim: usize, steps: usize, seed: u64, scale: f64) -> FlowModel<f64> {
    let arch = FlowArch::glow(dim, steps, 8, None);
    let mut m = FlowModel::new(arch, "prior", seed).unwrap();
    randomize(m.params_mut(), seed, scale);
    m
}

fn perm_arch(perm: Vec<usize>) -> FlowArch {
    FlowArch {
        dim: perm.len(),
        hidden: 4,
        activation: Activation::Tanh,
        clamp: DEFAULT_CLAMP,
        cond_dim: 0,
        blocks: vec![BlockSpec::ChannelPermutation { perm }],
    }
}

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), RngStream::new(seed, "flow-tests/data").normals(n)).unwrap()
}

/// log|det| of the Jacobian of `f` at `x`, assembled column by column with
/// central differences.
fn brute_force_logdet(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let h = 1e-5;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

#[test]
fn permutation_model_permutes_with_zero_logdet() {
    let m = FlowModel::<f64>::new(perm_arch(vec![2, 0, 1]), "p", 0).unwrap();
    let z = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
    let (x, ld) = m.forward(&z).unwrap();
    assert_eq!(x.data(), &[3.0, 1.0, 2.0]);
    assert_eq!(ld, vec![0.0]);
    assert_eq!(m.inverse(&x).unwrap().0, z);
}

#[test]
fn permutation_model_log_prob_at_origin() {
    let m = FlowModel::<f64>::new(perm_arch(vec![1, 0]), "p", 0).unwrap();
    let lp = m.log_prob(&Tensor::zeros(&[2])).unwrap();
    assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
}

#[test]
fn actnorm_logdet_is_sum_of_log_scales() {
    let arch = FlowArch {
        blocks: vec![BlockSpec::Actnorm],
        ..perm_arch(vec![0, 1, 2])
    };
    let mut m = FlowModel::<f64>::new(arch, "a", 0).unwrap();
    let s = [0.5f64, 2.0, 3.0];
    let ls: Vec<f64> = s.iter().map(|v| v.ln()).collect();
    m.params_mut().set("a.b0.log_scale", &ls).unwrap();
    m.params_mut().set("a.b0.shift", &[1.0, 0.0, -1.0]).unwrap();
    let (x, ld) = m.forward(&Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
    for (a, b) in x.data().iter().zip([1.5, 2.0, 2.0]) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!((ld[0] - s.iter().map(|v| v.ln()).sum::<f64>()).abs() < 1e-14);
}

#[test]
fn logdet_matches_brute_force_jacobian() {
    for (dim, seed) in [(2, 1), (4, 2), (6, 3)] {
        let m = random_model(dim, 3, seed, 0.3);
        let z = randn(seed + 10, &[dim]);
        let (_, ld) = m.forward(&z).unwrap();
        let fwd = |v: &[f64]| {
            let t = Tensor::from_f64(vec![dim], v).unwrap();
            m.forward(&t).unwrap().0.into_data()
        };
        let oracle = brute_force_logdet(fwd, z.data());
        assert!((ld[0] - oracle).abs() < 1e-5, "dim {dim}: {} vs {oracle}", ld[0]);
        // density identity: log p(G(z)) = log q(z) - log|det J|
        let x = m.forward(&z).unwrap().0;
        let lq: f64 = -0.5 * z.data().iter().map(|v| v * v).sum::<f64>()
            - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let lp = m.log_prob(&x).unwrap()[0];
        assert!((lp - (lq - oracle)).abs() < 1e-5);
    }
}

#[test]
fn round_trips_and_logdets_negate() {
    for (dim, seed) in [(2, 4), (5, 5), (8, 6)] {
        let m = random_model(dim, 4, seed, 0.3);
        let z = randn(seed, &[16, dim]);
        let (x, ldf) = m.forward(&z).unwrap();
        let (back, ldi) = m.inverse(&x).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-9);
        for (a, b) in ldf.iter().zip(&ldi) {
            assert!((a + b).abs() < 1e-9);
        }
        let (again, _) = m.forward(&back).unwrap();
        assert!(again.max_abs_diff(&x) < 1e-8);
    }
}

#[test]
fn squeeze_and_permutation_blocks_round_trip() {
    let arch = FlowArch {
        dim: 16,
        hidden: 6,
        activation: Activation::LeakyRelu,
        clamp: DEFAULT_CLAMP,
        cond_dim: 0,
        blocks: vec![
            BlockSpec::Squeeze {
                channels: 1,
                height: 4,
                width: 4,
            },
            BlockSpec::AffineCoupling { flip: false },
            BlockSpec::ChannelPermutation {
                perm: (0..16).rev().collect(),
            },
            BlockSpec::AffineCoupling { flip: true },
        ],
    };
    let mut m = FlowModel::<f64>::new(arch, "s", 3).unwrap();
    randomize(m.params_mut(), 3, 0.4);
    let z = randn(7, &[4, 16]);
    let (x, ld) = m.forward(&z).unwrap();
    let (back, ldi) = m.inverse(&x).unwrap();
    assert!(back.max_abs_diff(&z) < 1e-9);
    assert!(ld.iter().zip(&ldi).all(|(a, b)| (a + b).abs() < 1e-9));
    // squeeze groups each 2x2 patch across the four output channels
    let sq = FlowModel::<f64>::new(
        FlowArch {
            blocks: vec![BlockSpec::Squeeze {
                channels: 1,
                height: 4,
                width: 4,
            }],
            ..perm_arch((0..16).collect())
        },
        "q",
        0,
    )
    .unwrap();
    let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let (out, _) = sq.forward(&Tensor::from_f64(vec![16], &img).unwrap()).unwrap();
    assert_eq!(&out.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
    assert_eq!(&out.data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
}

#[test]
fn fresh_model_is_identity() {
    let m = FlowModel::<f64>::new(FlowArch::glow(4, 3, 16, None), "prior", 9).unwrap();
    let x = randn(1, &[5, 4]);
    let (z, ld) = m.inverse(&x).unwrap();
    assert_eq!(z, x);
    assert!(ld.iter().all(|v| *v == 0.0));
}

fn grid_mass(logp: impl Fn(&Tensor<f64>) -> Vec<f64>) -> f64 {
    let n = 400;
    let step = 8.0 / n as f64;
    let mut pts = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            pts.push(-4.0 + (i as f64 + 0.5) * step);
            pts.push(-4.0 + (j as f64 + 0.5) * step);
        }
    }
    let t = Tensor::new(vec![n * n, 2], pts).unwrap();
    logp(&t).iter().map(|v| v.exp()).sum::<f64>() * step * step
}

#[test]
fn density_integrates_to_one_on_grid() {
    let m = random_model(2, 4, 11, 0.15);
    let mass = grid_mass(|t| m.log_prob(t).unwrap());
    // the density is far from the latent Gaussian
    let probe = randn(12, &[50, 2]);
    let reference = FlowModel::<f64>::new(perm_arch(vec![0, 1]), "p", 0).unwrap();
    let gap = m
        .log_prob(&probe)
        .unwrap()
        .iter()
        .zip(reference.log_prob(&probe).unwrap())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    assert!(gap > 0.2, "gap {gap}");
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn scaling_shifts_log_prob() {
    let inner = random_model(3, 2, 12, 0.3);
    let c: f64 = 2.5;
    let mut arch = inner.arch().clone();
    arch.blocks.push(BlockSpec::Actnorm);
    let last = arch.blocks.len() - 1;
    let mut outer = FlowModel::<f64>::new(arch, "prior", 0).unwrap();
    for (name, t) in inner.params().iter() {
        outer.params_mut().set(name, t.data()).unwrap();
    }
    outer
        .params_mut()
        .set(&format!("prior.b{last}.log_scale"), &[c.ln(); 3])
        .unwrap();
    let x = randn(13, &[6, 3]);
    let cx = Tensor::new(vec![6, 3], x.data().iter().map(|v| c * v).collect()).unwrap();
    let a = inner.log_prob(&x).unwrap();
    let b = outer.log_prob(&cx).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((q - (p - 3.0 * c.ln())).abs() < 1e-12);
    }
}

#[test]
fn identity_model_samples_are_standard_normal() {
    let m = FlowModel::<f64>::new(FlowArch::glow(2, 2, 8, None), "prior", 0).unwrap();
    let count = 4000;
    let s = m.sample(count, &RngStream::new(5, "sample")).unwrap();
    for j in 0..2 {
        let mean: f64 = (0..count).map(|r| s.row(r)[j]).sum::<f64>() / count as f64;
        assert!(mean.abs() < 3.0 / (count as f64).sqrt());
    }
    let again = m.sample(count, &RngStream::new(5, "sample")).unwrap();
    assert_eq!(s, again);
    let other = m.sample(count, &RngStream::new(6, "sample")).unwrap();
    assert_ne!(s, other);
    assert!(m.sample(0, &RngStream::new(5, "sample")).is_err());
}

#[test]
fn non_finite_values_name_the_block() {
    let mut m = FlowModel::<f64>::new(FlowArch::glow(2, 2, 4, None), "prior", 0).unwrap();
    m.params_mut().set("prior.b3.log_scale", &[800.0, 0.0]).unwrap();
    let err = m.forward(&Tensor::from_f64(vec![2], &[1.0, 1.0]).unwrap()).unwrap_err();
    match err {
        Error::Numeric { op, .. } => assert!(op.starts_with("block 3/"), "{op}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn input_shape_is_checked() {
    let m = random_model(3, 1, 0, 0.1);
    assert!(matches!(m.forward(&Tensor::zeros(&[4])), Err(Error::Config(_))));
    assert!(FlowModel::<f64>::new(FlowArch::glow(1, 1, 4, None), "x", 0).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let m = random_model(3, 2, 21, 0.3);
    let x = randn(22, &[4, 3]);
    let objective = |store: &ParameterStore<f64>| -> f64 {
        let model = FlowModel::from_parts(m.arch().clone(), "prior", store.clone()).unwrap();
        model.log_prob(&x).unwrap().iter().sum()
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let lp = m.log_prob_var(&mut g, xv, None).unwrap();
    let total = g.sum(lp).unwrap();
    let grads = g.backward(total).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, t) in m.params().iter() {
        let analytic = grads.param(name).unwrap().to_vec();
        for i in 0..t.len() {
            let mut plus = m.params().clone();
            let mut minus = m.params().clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / (numeric.abs().max(1e-3));
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn actnorm_data_init_standardizes() {
    let mut m = FlowModel::<f64>::new(FlowArch::glow(3, 2, 8, None), "prior", 0).unwrap();
    let raw = randn(30, &[500, 3]);
    let data = Tensor::new(
        vec![500, 3],
        raw.data()
            .iter()
            .enumerate()
            .map(|(i, v)| 4.0 * v + (i % 3) as f64)
            .collect(),
    )
    .unwrap();
    m.initialize_actnorm(&data, None).unwrap();
    let (z, _) = m.inverse(&data).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..500).map(|r| z.row(r)[j]).collect();
        let mean = col.iter().sum::<f64>() / 500.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-9);
    }
}

fn cond_model(seed: u64, scale: f64) -> ConditionalFlowModel<f64> {
    let arch = ConditionalArch {
        flow: FlowArch::glow(2, 3, 8, None).with_cond_dim(4),
        conditioner: ConditionerSpec::Mlp { input: 3, hidden: 8 },
    };
    let mut m = ConditionalFlowModel::new(arch, "post", seed).unwrap();
    randomize(m.params_mut(), seed, scale);
    m
}

#[test]
fn zeroed_conditioner_ignores_measurement() {
    let mut m = cond_model(1, 0.3);
    for name in m.params().names() {
        if name.starts_with("post.cond.") {
            let n = m.params().get(&name).unwrap().len();
            m.params_mut().set(&name, &vec![0.0; n]).unwrap();
        }
    }
    let zeta = randn(2, &[5, 2]);
    let g1 = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
    let g2 = Tensor::from_f64(vec![3], &[-3.0, 0.0, 4.0]).unwrap();
    assert_eq!(m.cond_forward(&zeta, &g1).unwrap(), m.cond_forward(&zeta, &g2).unwrap());
    // and with a live conditioner it does depend on g
    let live = cond_model(1, 0.3);
    assert_ne!(live.cond_forward(&zeta, &g1).unwrap().0, live.cond_forward(&zeta, &g2).unwrap().0);
}

#[test]
fn conditional_round_trip_and_two_path_density() {
    let m = cond_model(3, 0.3);
    let meas = Tensor::from_f64(vec![3], &[0.2, 1.1, -0.7]).unwrap();
    let zeta = randn(4, &[8, 2]);
    let (f, ld) = m.cond_forward(&zeta, &meas).unwrap();
    let (back, ldi) = m.cond_inverse(&f, &meas).unwrap();
    assert!(back.max_abs_diff(&zeta) < 1e-9);
    let lp = m.cond_log_prob(&f, &meas).unwrap();
    for r in 0..8 {
        assert!((ld[r] + ldi[r]).abs() < 1e-9);
        let z = zeta.row(r);
        let lq = -0.5 * (z[0] * z[0] + z[1] * z[1]) - (2.0 * std::f64::consts::PI).ln();
        assert!((lp[r] - (lq - ld[r])).abs() < 1e-9);
    }
}

#[test]
fn conditional_density_integrates_to_one() {
    let m = cond_model(5, 0.15);
    let meas = Tensor::from_f64(vec![3], &[0.5, -0.5, 1.0]).unwrap();
    let mass = grid_mass(|t| m.cond_log_prob(t, &meas).unwrap());
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn permutation_only_conditional_matches_standard_normal() {
    let arch = ConditionalArch {
        flow: perm_arch(vec![1, 0]).with_cond_dim(2),
        conditioner: ConditionerSpec::Mlp { input: 2, hidden: 4 },
    };
    let m = ConditionalFlowModel::<f64>::new(arch, "post", 0).unwrap();
    let f = Tensor::from_f64(vec![2], &[0.3, -1.2]).unwrap();
    let lp = m.cond_log_prob(&f, &Tensor::from_f64(vec![2], &[5.0, 5.0]).unwrap()).unwrap();
    let want = -0.5 * (0.09 + 1.44) - (2.0 * std::f64::consts::PI).ln();
    assert!((lp[0] - want).abs() < 1e-14);
}

#[test]
fn conditioning_width_mismatch_is_config_error() {
    let m = cond_model(0, 0.1);
    let zeta = Tensor::zeros(&[2]);
    assert!(matches!(
        m.cond_forward(&zeta, &Tensor::zeros(&[4])),
        Err(Error::Config(_))
    ));
}

#[test]
fn pyramid_conditioner_round_trip() {
    let arch = ConditionalArch {
        flow: FlowArch::glow(16, 2, 8, Some((4, 4))).with_cond_dim(6),
        conditioner: ConditionerSpec::Pyramid {
            height: 4,
            width: 4,
            hidden: 8,
        },
    };
    let mut m = ConditionalFlowModel::<f64>::new(arch, "post", 2).unwrap();
    randomize(m.params_mut(), 2, 0.2);
    let meas = randn(3, &[16]);
    let zeta = randn(4, &[3, 16]);
    let (f, _) = m.cond_forward(&zeta, &meas).unwrap();
    assert!(m.cond_inverse(&f, &meas).unwrap().0.max_abs_diff(&zeta) < 1e-9);
}

#[test]
fn checkpoints_reload_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_model(4, 2, 40, 0.3);
    save_flow(&dir.path().join("prior"), &m).unwrap();
    let back: FlowModel<f64> = load_flow(&dir.path().join("prior")).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.arch(), m.arch());
    let x = randn(41, &[3, 4]);
    assert_eq!(back.log_prob(&x).unwrap(), m.log_prob(&x).unwrap());

    let c = cond_model(42, 0.3);
    save_conditional(&dir.path().join("post"), &c).unwrap();
    let cb: ConditionalFlowModel<f64> = load_conditional(&dir.path().join("post")).unwrap();
    assert_eq!(cb.params(), c.params());
    assert!(load_conditional::<f64>(&dir.path().join("prior")).is_err());
}

#[test]
fn arch_json_round_trips_and_rejects_unknown_keys() {
    let arch = FlowArch::glow(4, 2, 16, Some((2, 2)));
    let text = serde_json::to_string(&arch).unwrap();
    assert!(text.contains("\"invertible-1x1-mix\""));
    let back: FlowArch = serde_json::from_str(&text).unwrap();
    assert_eq!(back, arch);
    let bad = text.replacen("\"dim\"", "\"dimm\"", 1);
    assert!(serde_json::from_str::<FlowArch>(&bad).is_err());
}

#[test]
fn default_steps_grow_logarithmically() {
    assert_eq!(default_steps(2), 8);
    assert_eq!(default_steps(64), 12);
    assert_eq!(default_steps(1024), 20);
}

#[test]
fn single_precision_round_trip() {
    let mut m = FlowModel::<f32>::new(FlowArch::glow(4, 2, 8, None), "prior", 1).unwrap();
    let mut rng = RngStream::new(1, "f32");
    for (_, t) in m.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v = 0.2 * rng.normal() as f32;
        }
    }
    let z = Tensor::<f32>::new(vec![2, 4], rng.normals(8)).unwrap();
    let (x, _) = m.forward(&z).unwrap();
    assert!(m.inverse(&x).unwrap().0.max_abs_diff(&z) < 1e-4);
}
