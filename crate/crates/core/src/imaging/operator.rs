use serde::{Deserialize, Serialize};

use super::noise::NoiseModel;
use crate::diff::fft::fft2_pairs;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Serializable description of a linear forward operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity { n: usize },
    /// Periodic Gaussian blur of an `h x w` image with RMS width `sigma`.
    GaussianBlur { h: usize, w: usize, sigma: f64 },
    /// Unitary 2-D DFT keeping `h / ratio` equispaced rows (including DC).
    SubsampledFourier { h: usize, w: usize, ratio: usize },
    /// `m x n` matrix with iid `N(0, 1/m)` entries drawn from `seed`.
    Gaussian { m: usize, n: usize, seed: u64 },
    /// Explicit row-major `m x n` matrix.
    Dense { m: usize, n: usize, data: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub operator: OperatorSpec,
    pub noise: NoiseModel,
}

#[derive(Clone, Debug)]
enum Kernel<S> {
    Identity,
    Blur { h: usize, w: usize, kernel: Tensor<S> },
    Fourier { h: usize, w: usize, rows: Vec<usize> },
    /// `h_t` holds the transpose (`n x m`) so a batch is `f @ h_t`.
    Matrix { h: Tensor<S>, h_t: Tensor<S> },
}

/// Forward operator `H` plus noise model: `g = H f + n`.
#[derive(Clone, Debug)]
pub struct MeasurementModel<S> {
    spec: MeasurementSpec,
    kernel: Kernel<S>,
    n: usize,
    m: usize,
}

/// Gaussian kernel with standard deviation `sigma`, truncated at `4 sigma`
/// and normalized to unit sum.
pub fn gaussian_kernel<S: Scalar>(sigma: f64) -> Result<Tensor<S>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (4.0 * sigma).ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = Vec::with_capacity(size * size);
    for i in -r..=r {
        for j in -r..=r {
            let d2 = (i * i + j * j) as f64;
            k.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    Tensor::from_f64(vec![size, size], &k.iter().map(|v| v / total).collect::<Vec<_>>())
}

/// Retained k-space rows: `0, ratio, 2 ratio, ...`.
pub fn fourier_rows(h: usize, ratio: usize) -> Result<Vec<usize>> {
    if ratio == 0 || h % ratio != 0 {
        return Err(Error::config(format!(
            "undersampling ratio {ratio} must divide the image height {h}"
        )));
    }
    Ok((0..h / ratio).map(|i| i * ratio).collect())
}

fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, "operator/gaussian");
    let s = 1.0 / (m as f64).sqrt();
    (0..m * n).map(|_| rng.normal() * s).collect()
}

impl<S: Scalar> MeasurementModel<S> {
    pub fn new(spec: MeasurementSpec) -> Result<Self> {
        if !(spec.noise.sigma >= 0.0) || !spec.noise.sigma.is_finite() {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        let (kernel, n, m) = match &spec.operator {
            OperatorSpec::Identity { n } => (Kernel::Identity, *n, *n),
            OperatorSpec::GaussianBlur { h, w, sigma } => (
                Kernel::Blur {
                    h: *h,
                    w: *w,
                    kernel: gaussian_kernel(*sigma)?,
                },
                h * w,
                h * w,
            ),
            OperatorSpec::SubsampledFourier { h, w, ratio } => {
                let rows = fourier_rows(*h, *ratio)?;
                let m = 2 * rows.len() * w;
                (Kernel::Fourier { h: *h, w: *w, rows }, h * w, m)
            }
            OperatorSpec::Gaussian { m, n, seed } => {
                let data = gaussian_matrix(*m, *n, *seed);
                (Self::matrix_kernel(*m, *n, &data)?, *n, *m)
            }
            OperatorSpec::Dense { m, n, data } => (Self::matrix_kernel(*m, *n, data)?, *n, *m),
        };
        if n == 0 || m == 0 {
            return Err(Error::config("operator dimensions must be positive"));
        }
        Ok(Self {
            spec,
            kernel,
            n,
            m,
        })
    }

    fn matrix_kernel(m: usize, n: usize, data: &[f64]) -> Result<Kernel<S>> {
        let h = Tensor::from_f64(vec![m, n], data)?;
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = data[i * n + j];
            }
        }
        Ok(Kernel::Matrix {
            h,
            h_t: Tensor::from_f64(vec![n, m], &t)?,
        })
    }

    pub fn identity(n: usize, sigma: f64) -> Result<Self> {
        Self::new(MeasurementSpec {
            operator: OperatorSpec::Identity { n },
            noise: NoiseModel::gaussian(sigma),
        })
    }

    pub fn dense(h: &Tensor<S>, noise: NoiseModel) -> Result<Self> {
        if h.rank() != 2 {
            return Err(Error::config("dense operator must be a matrix"));
        }
        Self::new(MeasurementSpec {
            operator: OperatorSpec::Dense {
                m: h.shape()[0],
                n: h.shape()[1],
                data: h.to_f64(),
            },
            noise,
        })
    }

    pub fn spec(&self) -> &MeasurementSpec {
        &self.spec
    }

    pub fn noise(&self) -> NoiseModel {
        self.spec.noise
    }

    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        Self::new(MeasurementSpec {
            operator: self.spec.operator.clone(),
            noise,
        })
    }

    /// Object dimension `n`.
    pub fn input_dim(&self) -> usize {
        self.n
    }

    /// Measurement dimension `m` (real values; complex data counts twice).
    pub fn output_dim(&self) -> usize {
        self.m
    }

    fn check_cols(&self, shape: &[usize], want: usize, what: &str) -> Result<usize> {
        match shape {
            [b, c] if *c == want => Ok(*b),
            _ => Err(Error::config(format!(
                "{what}: expected [batch, {want}], got {shape:?}"
            ))),
        }
    }

    /// `H f` for a `[batch, n]` node.
    pub fn apply_var(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let b = self.check_cols(g.shape(f), self.n, "apply")?;
        match &self.kernel {
            Kernel::Identity => Ok(f),
            Kernel::Blur { h, w, kernel } => {
                let img = g.reshape(f, vec![b, *h, *w])?;
                let out = g.circ_conv2(img, kernel)?;
                g.reshape(out, vec![b, self.m])
            }
            Kernel::Fourier { h, w, rows } => {
                let re = g.reshape(f, vec![b, 1, *h, *w])?;
                let im = g.constant(Tensor::zeros(&[b, 1, *h, *w]));
                let c = g.concat(&[re, im], 1)?;
                let k = g.fft2(c, false)?;
                let kept = g.gather(k, 2, rows.clone())?;
                g.reshape(kept, vec![b, self.m])
            }
            Kernel::Matrix { h_t, .. } => {
                let ht = g.constant(h_t.clone());
                g.matmul(f, ht)
            }
        }
    }

    fn as_batch(&self, t: &Tensor<S>, width: usize, what: &str) -> Result<Tensor<S>> {
        if t.rank() == 1 && t.len() == width {
            return t.clone().reshape(vec![1, width]);
        }
        self.check_cols(t.shape(), width, what)?;
        Ok(t.clone())
    }

    /// `H f` for `[n]` or `[batch, n]` input; output keeps the batch layout.
    pub fn apply(&self, f: &Tensor<S>) -> Result<Tensor<S>> {
        let fb = self.as_batch(f, self.n, "apply")?;
        let mut g = Graph::no_grad();
        let v = g.constant(fb);
        let out = self.apply_var(&mut g, v)?;
        let t = g.tensor(out);
        if f.rank() == 1 {
            t.reshape(vec![self.m])
        } else {
            Ok(t)
        }
    }

    /// `H^T g`, computed directly (independent of the graph path).
    pub fn adjoint(&self, meas: &Tensor<S>) -> Result<Tensor<S>> {
        let gb = self.as_batch(meas, self.m, "adjoint")?;
        let b = gb.shape()[0];
        let out: Vec<S> = match &self.kernel {
            Kernel::Identity => gb.data().to_vec(),
            Kernel::Blur { h, w, kernel } => {
                let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
                crate::diff::circ_corr2(gb.data(), *h, *w, kernel.data(), kh, kw)
            }
            Kernel::Fourier { h, w, rows } => {
                let (h, w) = (*h, *w);
                let plane = h * w;
                let r = rows.len();
                let mut out = Vec::with_capacity(b * plane);
                let mut buf = vec![S::zero(); 2 * plane];
                for row in gb.data().chunks(self.m) {
                    buf.iter_mut().for_each(|v| *v = S::zero());
                    for c in 0..2 {
                        for (k, &y) in rows.iter().enumerate() {
                            let src = c * r * w + k * w;
                            let dst = c * plane + y * w;
                            buf[dst..dst + w].copy_from_slice(&row[src..src + w]);
                        }
                    }
                    fft2_pairs(&mut buf, h, w, true);
                    out.extend_from_slice(&buf[..plane]);
                }
                out
            }
            Kernel::Matrix { h, .. } => {
                let mut out = vec![S::zero(); b * self.n];
                // out[b, n] = g[b, m] @ H[m, n]
                S::gemm(
                    b,
                    self.m,
                    self.n,
                    S::one(),
                    gb.data(),
                    self.m as isize,
                    1,
                    h.data(),
                    self.n as isize,
                    1,
                    S::zero(),
                    &mut out,
                    self.n as isize,
                    1,
                );
                out
            }
        };
        let t = Tensor::new(vec![b, self.n], out)?;
        if meas.rank() == 1 {
            t.reshape(vec![self.n])
        } else {
            Ok(t)
        }
    }

    /// `H f + n` with the noise of row `i` drawn from `stream.at(first_index + i)`.
    pub fn measure(&self, f: &Tensor<S>, stream: &RngStream, first_index: u64) -> Result<Tensor<S>> {
        let mut out = self.apply(f)?;
        let sigma = self.spec.noise.sigma;
        if sigma > 0.0 {
            let m = self.m;
            for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
                let mut rng = stream.at(first_index + i as u64);
                for v in row.iter_mut() {
                    *v = *v + S::of(sigma * rng.normal());
                }
            }
        }
        Ok(out)
    }

    /// Log-density of the noise at `g - H f` for one measurement.
    pub fn noise_log_density(&self, residual: &[S]) -> Result<f64> {
        if residual.len() != self.m {
            return Err(Error::config(format!(
                "residual of length {} for {} measurements",
                residual.len(),
                self.m
            )));
        }
        self.spec.noise.log_density(residual)
    }

    /// Per-row `log q_n(meas - H f)` as a `[batch]` node.
    pub fn log_likelihood_var(&self, g: &mut Graph<S>, meas: Var, f: Var) -> Result<Var> {
        let hf = self.apply_var(g, f)?;
        let r = g.sub(meas, hf)?;
        self.spec.noise.log_density_var(g, r)
    }

    /// Dense `m x n` matrix of `H` (row-major), assembled column by column.
    pub fn matrix(&self) -> Result<Vec<f64>> {
        if let Kernel::Matrix { h, .. } = &self.kernel {
            return Ok(h.to_f64());
        }
        let eye = Tensor::<S>::eye(self.n);
        let cols = self.apply(&eye)?; // row j = H e_j
        let mut out = vec![0.0; self.m * self.n];
        for j in 0..self.n {
            for i in 0..self.m {
                out[i * self.n + j] = cols.data()[j * self.m + i].as_f64();
            }
        }
        Ok(out)
    }

    /// The blur kernel, if any, for export.
    pub fn kernel_tensor(&self) -> Option<Tensor<S>> {
        match &self.kernel {
            Kernel::Blur { kernel, .. } => Some(kernel.clone()),
            _ => None,
        }
    }

    /// `[h, w]` 0/1 sampling mask of a Fourier operator, for export.
    pub fn mask_tensor(&self) -> Option<Tensor<S>> {
        match &self.kernel {
            Kernel::Fourier { h, w, rows } => {
                let mut m = Tensor::zeros(&[*h, *w]);
                for &r in rows {
                    for x in 0..*w {
                        m.data_mut()[r * w + x] = S::one();
                    }
                }
                Some(m)
            }
            _ => None,
        }
    }
}
