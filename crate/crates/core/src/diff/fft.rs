//! Unitary 2-D DFT on real/imaginary channel pairs.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Transforms `data` laid out as `[batch, 2, h, w]` (real plane then imaginary
/// plane) in place. The scaling is `1/sqrt(h*w)` in both directions, so the
/// forward transform is unitary and the inverse is its adjoint.
pub fn fft2_pairs<S: Scalar>(data: &mut [S], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    let mut planner = FftPlanner::<S>::new();
    let (row_fft, col_fft): (Arc<dyn Fft<S>>, Arc<dyn Fft<S>>) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let scale = S::one() / S::of((plane as f64).sqrt());
    let mut buf = vec![Complex::new(S::zero(), S::zero()); plane];
    let mut col = vec![Complex::new(S::zero(), S::zero()); h];
    for chunk in data.chunks_mut(2 * plane) {
        let (re, im) = chunk.split_at_mut(plane);
        for i in 0..plane {
            buf[i] = Complex::new(re[i], im[i]);
        }
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for i in 0..plane {
            re[i] = buf[i].re * scale;
            im[i] = buf[i].im * scale;
        }
    }
}
