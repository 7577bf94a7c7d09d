//! SVG scatter plots and PGM image grids. Output depends only on the data,
//! so repeated runs write identical files.

use std::fmt::Write as _;

use ambientflow::{Error, Result};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Scatter plot of 2-D points with a square data window `[lo, hi]^2`.
pub fn svg_scatter(points: &[[f64; 2]], lo: f64, hi: f64, title: &str) -> Result<String> {
    if !(hi > lo) {
        return Err(Error::config(format!("empty plot window [{lo}, {hi}]")));
    }
    let inner = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - lo) / (hi - lo) * inner;
    let py = |y: f64| SIZE - MARGIN - (y - lo) / (hi - lo) * inner;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    for (v, anchor) in [(lo, "start"), (hi, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v}</text>"#,
            px(v),
            SIZE - MARGIN + 14.0
        );
    }
    let _ = writeln!(s, r##"<g fill="#1f4e9c" fill-opacity="0.35">"##);
    for p in points {
        if p[0] < lo || p[0] > hi || p[1] < lo || p[1] > hi || !p[0].is_finite() || !p[1].is_finite() {
            continue;
        }
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, px(p[0]), py(p[1]));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Binary PGM of `images` (each `h * w`, row-major) tiled `cols` per row
/// with a one-pixel gap. Gray levels span the joint range of all images.
pub fn pgm_grid(images: &[Vec<f64>], h: usize, w: usize, cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() || h == 0 || w == 0 || cols == 0 {
        return Err(Error::config("image grid needs at least one non-empty image"));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != h * w) {
        return Err(Error::config(format!("image of {} values does not fit {h}x{w}", bad.len())));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let finite = images.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pix = vec![0u8; gw * gh];
    for (k, im) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                let v = im[i * w + j];
                let g = if v.is_finite() { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
                pix[(r0 + i) * gw + c0 + j] = g as u8;
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}
