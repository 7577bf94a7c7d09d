use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Midpoint grid over `[lo, hi]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            cells: 400,
            lo: -4.0,
            hi: 4.0,
        }
    }
}

impl GridSpec {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    /// Cell centers, row-major with `x` fastest.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let h = self.step();
        let mut out = Vec::with_capacity(self.cells * self.cells);
        for j in 0..self.cells {
            for i in 0..self.cells {
                out.push([self.lo + (i as f64 + 0.5) * h, self.lo + (j as f64 + 0.5) * h]);
            }
        }
        out
    }

    fn cell_of(&self, v: f64) -> Option<usize> {
        let t = ((v - self.lo) / self.step()).floor();
        (t >= 0.0 && t < self.cells as f64).then_some(t as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlReport {
    /// `sum q (log q - log p) h^2` over the grid.
    pub kl: f64,
    /// Mass of the reference density captured by the grid.
    pub reference_mass: f64,
    /// Mass of the model density captured by the grid.
    pub model_mass: f64,
}

/// Riemann-sum `KL(q || p)` where `log_q` is the reference and `log_p` the
/// model; both map a batch of points to log densities.
pub fn kl_grid_2d<Q, P>(log_q: Q, log_p: P, grid: &GridSpec) -> Result<KlReport>
where
    Q: Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
    P: Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
{
    let pts = grid.points();
    let area = grid.step().powi(2);
    let mut kl = 0.0;
    let mut qm = 0.0;
    let mut pm = 0.0;
    for chunk in pts.chunks(4096) {
        let lq = log_q(chunk)?;
        let lp = log_p(chunk)?;
        if lq.len() != chunk.len() || lp.len() != chunk.len() {
            return Err(Error::usage("density callback returned the wrong number of values"));
        }
        for (a, b) in lq.iter().zip(&lp) {
            let q = a.exp();
            qm += q * area;
            pm += b.exp() * area;
            if q > 0.0 {
                kl += q * (a - b) * area;
            }
        }
    }
    if !kl.is_finite() {
        return Err(Error::numeric("kl_grid_2d", "non-finite divergence"));
    }
    Ok(KlReport {
        kl,
        reference_mass: qm,
        model_mass: pm,
    })
}

/// `KL(q || p_hat)` with `p_hat` a histogram of 2-D samples on the grid.
/// Each cell receives `pseudo_count` extra samples so empty cells stay finite.
pub fn kl_histogram_2d<S: Scalar, Q>(samples: &Tensor<S>, log_q: Q, grid: &GridSpec, pseudo_count: f64) -> Result<KlReport>
where
    Q: Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
{
    if samples.rank() != 2 || samples.shape()[1] != 2 || samples.rows() == 0 {
        return Err(Error::usage(format!("histogram KL needs [N, 2] samples, got {:?}", samples.shape())));
    }
    let c = grid.cells;
    let mut counts = vec![0.0; c * c];
    let mut inside = 0.0;
    for r in 0..samples.rows() {
        let row = samples.row(r);
        if let (Some(i), Some(j)) = (grid.cell_of(row[0].as_f64()), grid.cell_of(row[1].as_f64())) {
            counts[j * c + i] += 1.0;
            inside += 1.0;
        }
    }
    let n = samples.rows() as f64;
    let total = n + pseudo_count * (c * c) as f64;
    let area = grid.step().powi(2);
    let log_p: Vec<f64> = counts.iter().map(|k| ((k + pseudo_count) / (total * area)).ln()).collect();
    let mut report = kl_grid_2d(
        log_q,
        |pts| {
            Ok(pts
                .iter()
                .map(|p| match (grid.cell_of(p[0]), grid.cell_of(p[1])) {
                    (Some(i), Some(j)) => log_p[j * c + i],
                    _ => f64::NEG_INFINITY,
                })
                .collect())
        },
        grid,
    )?;
    report.model_mass = inside / n;
    Ok(report)
}

/// Nearest-center statistics of 2-D samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    /// Fraction of samples whose nearest center is each center.
    pub shares: Vec<f64>,
    /// Fraction of samples within `radius` of some center.
    pub capture: f64,
    /// Per-coordinate standard deviation of the samples assigned to each
    /// center about their own mean; NaN for modes with fewer than 2 samples.
    pub stds: Vec<f64>,
}

pub fn mode_report<S: Scalar>(samples: &Tensor<S>, centers: &[[f64; 2]], radius: f64) -> Result<ModeReport> {
    if samples.rank() != 2 || samples.shape()[1] != 2 || samples.rows() == 0 {
        return Err(Error::usage(format!("mode report needs [N, 2] samples, got {:?}", samples.shape())));
    }
    if centers.is_empty() {
        return Err(Error::usage("mode report needs at least one center"));
    }
    let k = centers.len();
    let mut count = vec![0usize; k];
    let mut sum = vec![[0.0; 2]; k];
    let mut sq = vec![0.0; k];
    let mut captured = 0usize;
    for r in 0..samples.rows() {
        let p = [samples.row(r)[0].as_f64(), samples.row(r)[1].as_f64()];
        let (best, d2) = centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if d2 <= radius * radius {
            captured += 1;
        }
        count[best] += 1;
        sum[best][0] += p[0];
        sum[best][1] += p[1];
        sq[best] += p[0] * p[0] + p[1] * p[1];
    }
    let n = samples.rows() as f64;
    let stds = (0..k)
        .map(|i| {
            let c = count[i] as f64;
            if count[i] < 2 {
                return f64::NAN;
            }
            let mean_sq = (sum[i][0].powi(2) + sum[i][1].powi(2)) / c;
            ((sq[i] - mean_sq).max(0.0) / (2.0 * (c - 1.0))).sqrt()
        })
        .collect();
    Ok(ModeReport {
        shares: count.iter().map(|&c| c as f64 / n).collect(),
        capture: captured as f64 / n,
        stds,
    })
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::usage(format!("metric inputs of lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same(a, b)?;
    Ok((a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    /// Dynamic range `L` of the data.
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 7,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Mean SSIM over all fully contained uniform windows of two `h x w` images.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    check_same(a, b)?;
    if a.len() != h * w {
        return Err(Error::usage(format!("{} pixels for a {h}x{w} image", a.len())));
    }
    let win = cfg.window;
    if win == 0 || win > h || win > w {
        return Err(Error::usage(format!("window {win} does not fit a {h}x{w} image")));
    }
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let np = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (u, v) = (a[y * w + x], b[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = saa / np - ma * ma;
            let vb = sbb / np - mb * mb;
            let cov = sab / np - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
