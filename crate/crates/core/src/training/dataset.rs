use std::cell::Cell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{aftn, Tensor};
use crate::error::{Error, Result};
use crate::imaging::MeasurementModel;
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Eight Gaussian blobs on a regular octagon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMixtureSpec {
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_sigma_f")]
    pub sigma_f: f64,
    #[serde(default = "default_sigma_n")]
    pub sigma_n: f64,
}

fn default_radius() -> f64 {
    1.0
}
fn default_sigma_f() -> f64 {
    0.15
}
fn default_sigma_n() -> f64 {
    0.45
}

impl Default for ToyMixtureSpec {
    fn default() -> Self {
        Self {
            radius: 1.0,
            sigma_f: 0.15,
            sigma_n: 0.45,
        }
    }
}

impl ToyMixtureSpec {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 4.0;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    /// Log-density of the object mixture at `x`, blob std `sigma`.
    pub fn log_density_with(&self, x: [f64; 2], sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        let terms: Vec<f64> = self
            .centers()
            .iter()
            .map(|c| {
                let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                -d2 / (2.0 * s2)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        m + (s / 8.0).ln() - (2.0 * std::f64::consts::PI * s2).ln()
    }

    /// Object density `q_f`.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        self.log_density_with(x, self.sigma_f)
    }

    /// Measurement density `q_g` (identity operator): blobs of std
    /// `sqrt(sigma_f^2 + sigma_n^2)`.
    pub fn measurement_log_density(&self, x: [f64; 2]) -> f64 {
        self.log_density_with(x, self.sigma_f.hypot(self.sigma_n))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.sigma_f > 0.0 && self.sigma_n >= 0.0) {
            return Err(Error::config("toy mixture needs radius > 0, sigma_f > 0, sigma_n >= 0"));
        }
        Ok(())
    }
}

/// Random axis-aligned piecewise-constant images: `jumps` cut positions per
/// axis split the (periodic) grid into cells of independent uniform values.
/// A 1-D signal is the case `height = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseSpec {
    #[serde(default = "one")]
    pub height: usize,
    pub width: usize,
    pub jumps: usize,
}

fn one() -> usize {
    1
}

impl PiecewiseSpec {
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    /// Sparsity level under the periodic discrete gradient that every
    /// generated signal satisfies.
    pub fn sparsity_bound(&self) -> usize {
        if self.height == 1 {
            self.jumps
        } else {
            self.jumps * (self.height + self.width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad_2d = self.height > 1 && self.jumps > self.height;
        if self.width == 0 || self.height == 0 || self.jumps == 0 || self.jumps > self.width || bad_2d {
            return Err(Error::config(format!(
                "piecewise images need 1 <= jumps <= side, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Where objects (if any) and measurements of a dataset are held. In
/// ambient mode the objects are quarantined: training code reads only
/// [`Dataset::measurements`], and every object read is counted.
#[derive(Debug)]
pub struct Dataset<S> {
    label: String,
    shape: Vec<usize>,
    objects: Option<Tensor<S>>,
    measurements: Option<Tensor<S>>,
    object_reads: Cell<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        label: &str,
        shape: Vec<usize>,
        objects: Option<Tensor<S>>,
        measurements: Option<Tensor<S>>,
    ) -> Result<Self> {
        let size = objects
            .as_ref()
            .or(measurements.as_ref())
            .map(|t| t.rows())
            .ok_or_else(|| Error::config("dataset needs objects or measurements"))?;
        if let (Some(o), Some(m)) = (&objects, &measurements) {
            if o.rows() != m.rows() {
                return Err(Error::config("objects and measurements differ in count"));
            }
        }
        if size == 0 {
            return Err(Error::config("empty dataset"));
        }
        Ok(Self {
            label: label.to_string(),
            shape,
            objects,
            measurements,
            object_reads: Cell::new(0),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Object shape, e.g. `[2]` or `[h, w]`.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.objects
            .as_ref()
            .or(self.measurements.as_ref())
            .map(|t| t.rows())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_objects(&self) -> bool {
        self.objects.is_some()
    }

    /// Ground-truth objects `[D, n]`; counted as an access.
    pub fn objects(&self) -> Result<&Tensor<S>> {
        self.object_reads.set(self.object_reads.get() + 1);
        self.objects
            .as_ref()
            .ok_or_else(|| Error::config(format!("dataset '{}' holds no objects", self.label)))
    }

    pub fn measurements(&self) -> Result<&Tensor<S>> {
        self.measurements
            .as_ref()
            .ok_or_else(|| Error::config(format!("dataset '{}' holds no measurements", self.label)))
    }

    /// Number of object reads so far.
    pub fn object_reads(&self) -> usize {
        self.object_reads.get()
    }

    /// Adds measurements `H f + n` of the objects.
    pub fn with_measurements(mut self, model: &MeasurementModel<S>, stream: &RngStream) -> Result<Self> {
        let objs = self
            .objects
            .as_ref()
            .ok_or_else(|| Error::config("cannot measure a dataset without objects"))?;
        self.measurements = Some(model.measure(objs, stream, 0)?);
        Ok(self)
    }

    /// Drops the objects, keeping only measurements.
    pub fn measurements_only(mut self) -> Result<Self> {
        self.measurements()?;
        self.objects = None;
        Ok(self)
    }
}

/// `size` toy objects and their identity-operator measurements at noise
/// `spec.sigma_n`. Object `i` uses `objects.at(i)`, its noise `noise.at(i)`.
pub fn make_toy2d<S: Scalar>(spec: &ToyMixtureSpec, size: usize, seed: u64) -> Result<Dataset<S>> {
    spec.validate()?;
    let centers = spec.centers();
    let objs = RngStream::new(seed, "data/objects");
    let mut f = Vec::with_capacity(2 * size);
    for i in 0..size {
        let mut r = objs.at(i as u64);
        let c = centers[r.below(8)];
        f.push(S::of(c[0] + spec.sigma_f * r.normal()));
        f.push(S::of(c[1] + spec.sigma_f * r.normal()));
    }
    let objects = Tensor::new(vec![size, 2], f)?;
    let noise = RngStream::new(seed, "data/noise");
    let mut g = objects.data().to_vec();
    if spec.sigma_n > 0.0 {
        for (i, row) in g.chunks_mut(2).enumerate() {
            let mut r = noise.at(i as u64);
            for v in row {
                *v = *v + S::of(spec.sigma_n * r.normal());
            }
        }
    }
    let meas = Tensor::new(vec![size, 2], g)?;
    Dataset::new("toy2d-octagon", vec![2], Some(objects), Some(meas))
}

fn cuts(r: &mut RngStream, len: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    for i in 0..k {
        let j = i + r.below(len - i);
        all.swap(i, j);
    }
    let mut c = all[..k].to_vec();
    c.sort_unstable();
    c
}

fn cell_of(pos: usize, cuts: &[usize]) -> usize {
    // cells between consecutive cuts, wrapping; index = number of cuts <= pos (mod count)
    let k = cuts.len();
    cuts.iter().filter(|&&c| c <= pos).count() % k
}

/// `size` piecewise-constant objects; object `i` uses `objects.at(i)`.
pub fn make_piecewise<S: Scalar>(spec: &PiecewiseSpec, size: usize, seed: u64) -> Result<Dataset<S>> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::config("dataset size must be positive"));
    }
    let stream = RngStream::new(seed, "data/objects");
    let (h, w, k) = (spec.height, spec.width, spec.jumps);
    let mut data = Vec::with_capacity(size * h * w);
    for i in 0..size {
        let mut r = stream.at(i as u64);
        let cx = cuts(&mut r, w, k);
        let cy = if h > 1 { cuts(&mut r, h, k) } else { vec![0] };
        let ny = cy.len();
        let values: Vec<f64> = (0..k * ny).map(|_| r.uniform()).collect();
        for y in 0..h {
            let row = if h > 1 { cell_of(y, &cy) } else { 0 };
            for x in 0..w {
                data.push(S::of(values[row * k + cell_of(x, &cx)]));
            }
        }
    }
    let shape = if h == 1 { vec![w] } else { vec![h, w] };
    Dataset::new("piecewise", shape, Some(Tensor::new(vec![size, h * w], data)?), None)
}

/// Writes each object to `dir/object_<i>.aftn` (zero-padded index).
pub fn export_directory<S: Scalar>(data: &Dataset<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let objs = data.objects()?;
    let width = objs.rows().to_string().len().max(5);
    for i in 0..objs.rows() {
        let t = Tensor::new(data.shape().to_vec(), objs.row(i).to_vec())?;
        aftn::write(&dir.join(format!("object_{i:0width$}.aftn")), &t)?;
    }
    Ok(())
}

/// Reads every `*.aftn` file of `dir` (sorted by name) as one object of `shape`.
pub fn ingest_directory<S: Scalar>(dir: &Path, shape: &[usize]) -> Result<Dataset<S>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Ingest {
        file: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "aftn"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest {
            file: dir.to_path_buf(),
            detail: "no .aftn files".into(),
        });
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(files.len() * n);
    for f in &files {
        let t = aftn::read::<S>(f)?;
        if t.shape() != shape {
            return Err(Error::Ingest {
                file: f.clone(),
                detail: format!("shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        data.extend_from_slice(t.data());
    }
    Dataset::new(
        "tensor-directory",
        shape.to_vec(),
        Some(Tensor::new(vec![files.len(), n], data)?),
        None,
    )
}
