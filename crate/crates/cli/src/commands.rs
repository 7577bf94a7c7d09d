use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use ambientflow::analysis::{
    check_projection_lemma, kl_grid_2d, mode_report, operator_norm, rmse, ssim, thm2_bound, w1_empirical, GridSpec,
    RicProblem, SsimConfig,
};
use ambientflow::diff::aftn;
use ambientflow::imaging::{MeasurementModel, MeasurementSpec, SparsityModel, SparsitySpec, TransformSpec};
use ambientflow::inference::{
    ald_sample, map_csgm, mmse_and_std, posterior_net_sample, AldSchedule, MapConfig, PosteriorEnsemble,
};
use ambientflow::training::{make_piecewise, make_toy2d, DatasetSpec, ExperimentConfig, Trainer};
use ambientflow::{ConditionalFlowModel, Error, FlowModel, Result, RngStream, Tensor};

use crate::manifest::{config_hash, run_in, Run};
use crate::pair::{bound_ordering, fixed_pair, ordering_violations};
use crate::plot::{pgm_grid, svg_scatter};
use crate::{parallel_map, worker_threads};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn file_digest(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::Ingest {
            file: p.to_path_buf(),
            detail: e.to_string(),
        })?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// `[N, n]` view of a tensor that may be a single row `[n]`.
fn as_rows(t: Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => {
            let n = t.len();
            Ok(t.reshape(vec![1, n])?)
        }
        2 => Ok(t),
        _ => Err(Error::config(format!("expected a [rows, n] tensor, got {:?}", t.shape()))),
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn write_metrics(path: &Path, rows: &[(String, f64)], hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value", "config_hash", "seed"])?;
    for (name, v) in rows {
        w.write_record([name.as_str(), &format!("{v:e}"), hash, &seed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A trained checkpoint directory as written by `train`.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub hash: String,
    pub prior: FlowModel,
    pub posterior: Option<ConditionalFlowModel>,
    pub measurement: Option<MeasurementModel<f64>>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let t = Trainer::<f64>::resume(dir)?;
        Ok(Self {
            config: t.config().clone(),
            hash: config_hash(t.config())?,
            prior: t.prior().clone(),
            posterior: t.posterior().cloned(),
            measurement: t.measurement_model().cloned(),
        })
    }

    /// Measurement model from `spec` if given, else the trained one.
    pub fn measurement_or(&self, spec: Option<&Path>) -> Result<MeasurementModel<f64>> {
        match spec {
            Some(p) => MeasurementModel::new(read_json::<MeasurementSpec>(p)?),
            None => self
                .measurement
                .clone()
                .ok_or_else(|| Error::config("checkpoint has no measurement model; pass --measurement-spec")),
        }
    }

    /// `(h, w)` for previews: the image shape, or one row per signal.
    pub fn preview_shape(&self) -> (usize, usize) {
        self.config
            .dataset
            .image_shape()
            .unwrap_or((1, self.config.dataset.dim()))
    }
}

fn write_preview(run: &mut Run, name: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<()> {
    let shown: Vec<Vec<f64>> = rows.iter().take(64).cloned().collect();
    let cols = if shape.0 == 1 { 1 } else { 8 };
    std::fs::write(run.path(name), pgm_grid(&shown, shape.0, shape.1, cols)?)?;
    run.artifact(name);
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Experiment configuration (JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Validate the configuration and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_json(&read_text(&a.config)?)?;
    let hash = config_hash(&cfg)?;
    if a.dry_run {
        let summary = json!({
            "valid": true,
            "config_hash": hash,
            "mode": cfg.mode,
            "dim": cfg.dataset.dim(),
            "prior_steps": cfg.prior_steps(),
            "posterior_steps": cfg.posterior_steps(),
        });
        println!("{summary}");
        return Ok(());
    }
    let out = a
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::usage("train needs --out-dir unless --dry-run is given"))?;
    run_in(out, "train", hash, cfg.seed, |run| {
        let (t, _) = ambientflow::training::train::<f64>(&cfg, Some(&run.path("checkpoint")))?;
        run.artifact("checkpoint");
        run.artifact("checkpoint/metrics.csv");
        if let Some(last) = t.history().last() {
            run.metric("final_loss", last.loss);
            run.metric("final_log_prior", last.log_prior);
            run.metric("final_penalty", last.penalty);
        }
        run.metric("steps", t.steps_done() as f64);
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- sample

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    /// Checkpoint directory written by `train`.
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Draw from the posterior network for this measurement instead of the prior.
    #[arg(long)]
    pub measurement: Option<PathBuf>,
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if a.count == 0 {
        return Err(Error::config("--count must be positive"));
    }
    let stream = RngStream::new(a.seed, "cli/sample");
    run_in(&a.out_dir, "sample", ck.hash.clone(), a.seed, |run| {
        let samples = match &a.measurement {
            None => ck.prior.sample(a.count, &stream)?,
            Some(p) => {
                let post = ck
                    .posterior
                    .as_ref()
                    .ok_or_else(|| Error::config("checkpoint has no posterior network"))?;
                let model = ck.measurement_or(None)?;
                posterior_net_sample(post, &model, &aftn::read(p)?, a.count, &stream)?.samples
            }
        };
        aftn::write(&run.path("samples.aftn"), &samples)?;
        run.artifact("samples.aftn");
        if samples.shape()[1] == 2 {
            let pts: Vec<[f64; 2]> = (0..samples.rows()).map(|r| [samples.row(r)[0], samples.row(r)[1]]).collect();
            let reach = pts
                .iter()
                .flat_map(|p| [p[0].abs(), p[1].abs()])
                .filter(|v| v.is_finite())
                .fold(1.0f64, f64::max);
            let lim = ((reach * 2.0).ceil() / 2.0).min(10.0);
            std::fs::write(run.path("samples.svg"), svg_scatter(&pts, -lim, lim, "samples")?)?;
            run.artifact("samples.svg");
        } else {
            write_preview(run, "samples.pgm", &rows_of(&samples), ck.preview_shape())?;
        }
        run.metric("count", samples.rows() as f64);
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// Checkpoint whose dataset generator and measurement model are used.
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Seed of the test objects; keep it apart from the training seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Measurement model (JSON) overriding the checkpoint's.
    #[arg(long)]
    pub measurement_spec: Option<PathBuf>,
}

/// Fresh objects from the checkpoint's dataset generator and their
/// measurements.
pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.measurement_or(a.measurement_spec.as_deref())?;
    let objects: Tensor = match &ck.config.dataset {
        DatasetSpec::Toy2dOctagon { .. } => {
            make_toy2d(&ck.config.dataset.toy(0.0).expect("toy"), a.count, a.seed)?.objects()?.clone()
        }
        DatasetSpec::PiecewiseImage { .. } => {
            let spec = ck.config.dataset.piecewise().expect("piecewise");
            make_piecewise(&spec, a.count, a.seed)?.objects()?.clone()
        }
        DatasetSpec::TensorDirectory { .. } => {
            return Err(Error::config("simulate needs a synthetic dataset generator"));
        }
    };
    let objects = objects.reshape(vec![a.count, ck.config.dataset.dim()])?;
    run_in(&a.out_dir, "simulate", ck.hash.clone(), a.seed, |run| {
        let meas = model.measure(&objects, &RngStream::new(a.seed, "cli/simulate/noise"), 0)?;
        aftn::write(&run.path("objects.aftn"), &objects)?;
        aftn::write(&run.path("measurements.aftn"), &meas)?;
        run.artifact("objects.aftn");
        run.artifact("measurements.aftn");
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- reconstruct

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Map,
    Ald,
    PosteriorNet,
}

#[derive(Args, Debug, Clone)]
pub struct ReconstructArgs {
    pub checkpoint: PathBuf,
    /// Measurements `[G, m]` (AFTN).
    #[arg(long)]
    pub measurements: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Posterior samples per measurement (ald, posterior-net).
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    /// MAP settings (JSON).
    #[arg(long)]
    pub map_config: Option<PathBuf>,
    /// Annealing ladder (JSON); defaults to [`default_ald_schedule`].
    #[arg(long)]
    pub ald_schedule: Option<PathBuf>,
    #[arg(long)]
    pub measurement_spec: Option<PathBuf>,
    /// Ground-truth objects `[G, n]` for RMSE and SSIM columns.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

/// Ten geometric rungs from 1 down to 0.01 with 40 steps each. The first
/// step size is a tenth of the inverse likelihood curvature at the top rung
/// and shrinks with the squared rung level.
pub fn default_ald_schedule(model: &MeasurementModel<f64>) -> Result<AldSchedule> {
    let h = model.matrix()?;
    let norm = operator_norm(&h, model.output_dim(), model.input_dim())?.max(1e-12);
    let sigma_n = model.noise().sigma;
    let step = 0.1 * (sigma_n * sigma_n + 1.0) / (norm * norm);
    AldSchedule::geometric(1.0, 0.01, 10, 40, step)
}

pub struct Reconstruction {
    pub estimate: Vec<f64>,
    pub std: Option<Vec<f64>>,
    pub residual_norm: f64,
}

fn residual(model: &MeasurementModel<f64>, g: &[f64], f: &[f64]) -> Result<f64> {
    let hf = model.apply(&Tensor::new(vec![1, f.len()], f.to_vec())?)?;
    Ok(g.iter().zip(hf.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

fn from_ensemble(model: &MeasurementModel<f64>, g: &[f64], ens: &PosteriorEnsemble<f64>) -> Result<Reconstruction> {
    let (mean, std) = mmse_and_std(ens)?;
    Ok(Reconstruction {
        residual_norm: residual(model, g, &mean)?,
        estimate: mean,
        std: Some(std),
    })
}

/// Default SSIM settings with the window shrunk to fit small images.
fn ssim_config(h: usize, w: usize) -> SsimConfig {
    let d = SsimConfig::default();
    let side = d.window.min(h).min(w);
    SsimConfig {
        window: if side % 2 == 0 { side - 1 } else { side },
        ..d
    }
}

/// Reconstructs one measurement row.
pub fn reconstruct_one(
    ck: &Checkpoint,
    model: &MeasurementModel<f64>,
    method: Method,
    g: &[f64],
    samples: usize,
    map: &MapConfig,
    ald: &AldSchedule,
    stream: &RngStream,
) -> Result<Reconstruction> {
    let row = Tensor::new(vec![1, g.len()], g.to_vec())?;
    match method {
        Method::Map => {
            let r = map_csgm(&ck.prior, model, &row, map, stream)?;
            Ok(Reconstruction {
                estimate: r.estimate.data().to_vec(),
                std: None,
                residual_norm: r.residual_norm,
            })
        }
        Method::Ald => from_ensemble(model, g, &ald_sample(&ck.prior, model, &row, samples, ald, stream)?),
        Method::PosteriorNet => {
            let post = ck
                .posterior
                .as_ref()
                .ok_or_else(|| Error::config("checkpoint has no posterior network"))?;
            from_ensemble(model, g, &posterior_net_sample(post, model, &row, samples, stream)?)
        }
    }
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let threads = worker_threads()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.measurement_or(a.measurement_spec.as_deref())?;
    let meas = as_rows(aftn::read(&a.measurements)?)?;
    if meas.shape()[1] != model.output_dim() {
        return Err(Error::config(format!(
            "measurements have width {}, the operator produces {}",
            meas.shape()[1],
            model.output_dim()
        )));
    }
    let truth = match &a.truth {
        Some(p) => {
            let t = as_rows(aftn::read(p)?)?;
            if t.rows() != meas.rows() || t.shape()[1] != model.input_dim() {
                return Err(Error::config(format!(
                    "truth {:?} does not pair with {} measurements of {} values",
                    t.shape(),
                    meas.rows(),
                    model.input_dim()
                )));
            }
            Some(t)
        }
        None => None,
    };
    let map = match &a.map_config {
        Some(p) => read_json::<MapConfig>(p)?,
        None => MapConfig::default(),
    };
    map.validate()?;
    let ald = match &a.ald_schedule {
        Some(p) => read_json::<AldSchedule>(p)?,
        None => default_ald_schedule(&model)?,
    };
    ald.validate()?;
    if a.method != Method::Map && a.samples < 2 {
        return Err(Error::config("--samples must be at least 2"));
    }
    let root = RngStream::new(a.seed, "cli/reconstruct");
    let method_name = format!("reconstruct/{:?}", a.method).to_lowercase();
    run_in(&a.out_dir, &method_name, ck.hash.clone(), a.seed, |run| {
        let results = parallel_map(meas.rows(), threads, |i| {
            let stream = root.split(&format!("g/{i}"));
            reconstruct_one(&ck, &model, a.method, meas.row(i), a.samples, &map, &ald, &stream)
                .map_err(|e| e.context(format!("measurement {i}")))
        })?;
        let n = model.input_dim();
        let est: Vec<f64> = results.iter().flat_map(|r| r.estimate.iter().copied()).collect();
        aftn::write(&run.path("estimates.aftn"), &Tensor::new(vec![results.len(), n], est)?)?;
        run.artifact("estimates.aftn");
        if results.iter().all(|r| r.std.is_some()) {
            let std: Vec<f64> = results.iter().flat_map(|r| r.std.clone().expect("checked")).collect();
            aftn::write(&run.path("std.aftn"), &Tensor::new(vec![results.len(), n], std)?)?;
            run.artifact("std.aftn");
        }
        let shape = ck.config.dataset.image_shape();
        let mut w = csv::Writer::from_path(run.path("reconstruct.csv"))?;
        let mut header = vec!["index", "residual_norm"];
        if truth.is_some() {
            header.push("rmse");
            if shape.is_some() {
                header.push("ssim");
            }
        }
        w.write_record(&header)?;
        let (mut rmse_sum, mut ssim_sum) = (0.0, 0.0);
        for (i, r) in results.iter().enumerate() {
            let mut rec = vec![i.to_string(), format!("{:e}", r.residual_norm)];
            if let Some(t) = &truth {
                let e = rmse(&r.estimate, t.row(i))?;
                rmse_sum += e;
                rec.push(format!("{e:e}"));
                if let Some((h, wd)) = shape {
                    let s = ssim(&r.estimate, t.row(i), h, wd, &ssim_config(h, wd))?;
                    ssim_sum += s;
                    rec.push(format!("{s:e}"));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        run.artifact("reconstruct.csv");
        let count = results.len() as f64;
        if truth.is_some() {
            run.metric("mean_rmse", rmse_sum / count);
            if shape.is_some() {
                run.metric("mean_ssim", ssim_sum / count);
            }
        }
        run.metric("mean_residual_norm", results.iter().map(|r| r.residual_norm).sum::<f64>() / count);
        if n > 2 {
            let rows: Vec<Vec<f64>> = results.iter().map(|r| r.estimate.clone()).collect();
            write_preview(run, "estimates.pgm", &rows, ck.preview_shape())?;
        }
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Samples `[N, n]` (AFTN).
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Reference samples `[N, n]`; with `--samples` gives the empirical W1.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Estimates `[G, n]` scored against `--truth` by RMSE and SSIM.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Image shape `HxW` for SSIM.
    #[arg(long)]
    pub image_shape: Option<String>,
    /// Toy checkpoint: grid KL of its prior and, with `--samples`, the mode report.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Capture radius of the mode report.
    #[arg(long, default_value_t = 0.3)]
    pub radius: f64,
    #[arg(long, default_value_t = 400)]
    pub grid_cells: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("image shape must look like 8x8, got '{s}'"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Metric rows `(name, value)` for the given inputs.
pub fn evaluate_metrics(a: &EvaluateArgs) -> Result<Vec<(String, f64)>> {
    let mut rows: Vec<(String, f64)> = Vec::new();
    let samples = a.samples.as_deref().map(aftn::read::<f64>).transpose()?.map(as_rows).transpose()?;
    let ck = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(r) = &a.reference {
        let s = samples.as_ref().ok_or_else(|| Error::usage("--reference needs --samples"))?;
        let est = w1_empirical(s, &as_rows(aftn::read(r)?)?)?;
        rows.push(("w1".into(), est.value));
        rows.push(("w1_exact".into(), if est.exact { 1.0 } else { 0.0 }));
    }
    match (&a.estimates, &a.truth) {
        (Some(e), Some(t)) => {
            let (e, t) = (as_rows(aftn::read(e)?)?, as_rows(aftn::read(t)?)?);
            if e.shape() != t.shape() {
                return Err(Error::config(format!("estimates {:?} vs truth {:?}", e.shape(), t.shape())));
            }
            let shape = match (&a.image_shape, &ck) {
                (Some(s), _) => Some(parse_shape(s)?),
                (None, Some(c)) => c.config.dataset.image_shape(),
                _ => None,
            };
            let g = e.rows() as f64;
            let mut r = 0.0;
            let mut s = 0.0;
            for i in 0..e.rows() {
                r += rmse(e.row(i), t.row(i))?;
                if let Some((h, w)) = shape {
                    s += ssim(e.row(i), t.row(i), h, w, &ssim_config(h, w))?;
                }
            }
            rows.push(("rmse".into(), r / g));
            if shape.is_some() {
                rows.push(("ssim".into(), s / g));
            }
        }
        (None, None) => {}
        _ => return Err(Error::usage("--estimates and --truth go together")),
    }
    if let Some(ck) = &ck {
        let toy = ck
            .config
            .dataset
            .toy(ck.config.measurement.as_ref().map(|m| m.noise.sigma).unwrap_or(0.0));
        if let Some(toy) = toy {
            let grid = GridSpec {
                cells: a.grid_cells,
                ..GridSpec::default()
            };
            let truth = |p: &[[f64; 2]]| Ok(p.iter().map(|x| toy.log_density(*x)).collect());
            let prior = &ck.prior;
            let model = |p: &[[f64; 2]]| {
                let flat: Vec<f64> = p.iter().flat_map(|x| *x).collect();
                prior.log_prob(&Tensor::new(vec![p.len(), 2], flat)?)
            };
            let kl = kl_grid_2d(truth, model, &grid)?;
            rows.push(("kl".into(), kl.kl));
            rows.push(("kl_reference_mass".into(), kl.reference_mass));
            rows.push(("kl_model_mass".into(), kl.model_mass));
            if toy.sigma_n > 0.0 {
                let meas = |p: &[[f64; 2]]| Ok(p.iter().map(|x| toy.measurement_log_density(*x)).collect());
                rows.push(("kl_measurements".into(), kl_grid_2d(truth, meas, &grid)?.kl));
            }
            if let Some(s) = &samples {
                let r = mode_report(s, &toy.centers(), a.radius)?;
                rows.push(("mode_capture".into(), r.capture));
                let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
                rows.push(("mode_share_min".into(), fold(&r.shares, f64::INFINITY, f64::min)));
                rows.push(("mode_share_max".into(), fold(&r.shares, f64::NEG_INFINITY, f64::max)));
                rows.push(("mode_std_max".into(), fold(&r.stds, f64::NEG_INFINITY, f64::max)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::usage("nothing to evaluate; pass --samples/--reference, --estimates/--truth or --checkpoint"));
    }
    Ok(rows)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let inputs: Vec<&Path> = [&a.samples, &a.reference, &a.estimates, &a.truth]
        .into_iter()
        .flatten()
        .map(|p| p.as_path())
        .collect();
    let mut hashed = inputs.clone();
    let ck_cfg = a.checkpoint.as_ref().map(|c| c.join("config.json"));
    if let Some(c) = &ck_cfg {
        hashed.push(c);
    }
    let hash = file_digest(&hashed)?;
    let rows = evaluate_metrics(a)?;
    run_in(&a.out_dir, "evaluate", hash.clone(), a.seed, |run| {
        write_metrics(&run.path("metrics.csv"), &rows, &hash, a.seed)?;
        run.artifact("metrics.csv");
        for (k, v) in &rows {
            run.metric(k, *v);
        }
        Ok(())
    })?;
    Ok(())
}

// ---------------------------------------------------------------- theory

#[derive(Subcommand, Debug, Clone)]
pub enum TheoryCmd {
    /// Restricted isometry constants of a Gaussian operator under a sparsifying transform.
    Ric(RicArgs),
    /// Wasserstein recovery bound from its four inputs.
    Bound(BoundArgs),
    /// Assignment W1 against the mean projection distance on random points.
    ProjectionLemma(LemmaArgs),
    /// Ordering of the multi-sample bounds on a fixed small model pair.
    IwaeOrder(IwaeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Transform {
    Identity,
    Gradient1d,
}

impl Transform {
    fn spec(self, n: usize) -> TransformSpec {
        match self {
            Transform::Identity => TransformSpec::Identity { n },
            Transform::Gradient1d => TransformSpec::DiscreteGradient1d { n },
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RicArgs {
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Transform::Gradient1d)]
    pub transform: Transform,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BoundArgs {
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub hnorm: f64,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub epsp: f64,
}

#[derive(Args, Debug, Clone)]
pub struct LemmaArgs {
    /// Number of random points.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Signal length.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = Transform::Identity)]
    pub transform: Transform,
}

#[derive(Args, Debug, Clone)]
pub struct IwaeArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Sample counts to compare.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16])]
    pub m: Vec<usize>,
    /// Standard errors of slack before a decrease counts as a violation.
    #[arg(long, default_value_t = 3.0)]
    pub z: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn theory(cmd: &TheoryCmd) -> Result<serde_json::Value> {
    match cmd {
        TheoryCmd::Ric(a) => {
            let op = MeasurementModel::<f64>::new(MeasurementSpec {
                operator: ambientflow::imaging::OperatorSpec::Gaussian {
                    m: a.m,
                    n: a.n,
                    seed: a.seed,
                },
                noise: ambientflow::imaging::NoiseModel::gaussian(0.0),
            })?;
            let h = op.matrix()?;
            let phi = SparsityModel::<f64>::new(SparsitySpec {
                transform: a.transform.spec(a.n),
                k: a.k,
            })?;
            let problem = RicProblem::new(&h, a.m, &phi.matrix(), phi.transform_dim(), a.n)?;
            let report = problem.report(a.k)?;
            let h_norm = operator_norm(&h, a.m, a.n)?;
            if let Some(dir) = &a.out_dir {
                let hash = config_hash(&json!({"m": a.m, "n": a.n, "k": a.k, "seed": a.seed, "transform": format!("{:?}", a.transform)}))?;
                run_in(dir, "theory/ric", hash, a.seed, |run| {
                    let mut w = csv::Writer::from_path(run.path("ric.csv"))?;
                    w.write_record(["s", "delta", "lambda_min", "lambda_max", "supports", "coverage"])?;
                    for l in &report.levels {
                        w.write_record([
                            l.s.to_string(),
                            format!("{:e}", l.delta),
                            format!("{:e}", l.lambda_min),
                            format!("{:e}", l.lambda_max),
                            l.supports.to_string(),
                            format!("{:e}", l.coverage),
                        ])?;
                    }
                    w.flush()?;
                    run.artifact("ric.csv");
                    run.metric("h_norm", h_norm);
                    run.metric("delta_k", report.delta_k());
                    Ok(())
                })?;
            }
            Ok(json!({
                "k": a.k,
                "h_norm": h_norm,
                "deltas": report.levels.iter().map(|l| l.delta).collect::<Vec<_>>(),
                "rip_satisfied": report.rip_satisfied,
            }))
        }
        TheoryCmd::Bound(a) => Ok(json!({ "bound": thm2_bound(a.delta, a.hnorm, a.eps, a.epsp)? })),
        TheoryCmd::ProjectionLemma(a) => {
            if a.n == 0 || a.dim == 0 {
                return Err(Error::config("projection lemma needs --n and --dim positive"));
            }
            let x = Tensor::new(
                vec![a.n, a.dim],
                RngStream::new(a.seed, "cli/projection-lemma").normals(a.n * a.dim),
            )?;
            let model = SparsityModel::<f64>::new(SparsitySpec {
                transform: a.transform.spec(a.dim),
                k: a.k,
            })?;
            let r = check_projection_lemma(&x, &model)?;
            Ok(json!({
                "w1": r.w1,
                "mean_projection_distance": r.mean_projection_distance,
                "difference": (r.w1 - r.mean_projection_distance).abs(),
                "equal": r.equal,
            }))
        }
        TheoryCmd::IwaeOrder(a) => {
            if a.m.is_empty() || a.m.contains(&0) || a.draws < 2 || a.trials == 0 {
                return Err(Error::config("iwae-order needs positive --m values, --draws >= 2 and --trials >= 1"));
            }
            let pair = fixed_pair(a.seed)?;
            let est = bound_ordering(&pair, &a.m, a.draws, a.trials, &RngStream::new(a.seed, "cli/iwae-order"))?;
            let bad = ordering_violations(&est, a.z);
            if let Some(dir) = &a.out_dir {
                let hash = config_hash(&json!({"m": a.m, "draws": a.draws, "trials": a.trials, "seed": a.seed}))?;
                run_in(dir, "theory/iwae-order", hash, a.seed, |run| {
                    let mut w = csv::Writer::from_path(run.path("iwae_order.csv"))?;
                    w.write_record(["trial", "m", "mean", "se"])?;
                    for e in &est {
                        w.write_record([e.trial.to_string(), e.m.to_string(), format!("{:e}", e.mean), format!("{:e}", e.se)])?;
                    }
                    w.flush()?;
                    run.artifact("iwae_order.csv");
                    run.metric("violations", bad.len() as f64);
                    Ok(())
                })?;
            }
            Ok(json!({
                "trials": a.trials,
                "violations": bad.len(),
                "violation_rate": bad.len() as f64 / a.trials as f64,
            }))
        }
    }
}
