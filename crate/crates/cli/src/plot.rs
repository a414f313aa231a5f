//! Minimal raster plots written as PNG.

use std::path::Path;

use albedo_core::dataset::write_png;
use albedo_core::{ImageTensor, Result};

const COLOURS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Line chart of several series on a shared log-scaled y axis, each smoothed with a
/// trailing moving average.
pub fn loss_curves(series: &[Vec<f64>], path: &Path) -> Result<()> {
    const W: usize = 480;
    const H: usize = 240;
    const PAD: usize = 8;
    let mut rgb = vec![255u8; W * H * 3];
    let smooth = |s: &[f64]| -> Vec<f64> {
        let win = (s.len() / 50).max(1);
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            acc += s[i];
            if i >= win {
                acc -= s[i - win];
            }
            out.push(acc / (i + 1).min(win) as f64);
        }
        out
    };
    let curves: Vec<Vec<f64>> = series.iter().map(|s| smooth(s)).collect();
    let logs = curves
        .iter()
        .flatten()
        .filter(|v| **v > 0.0 && v.is_finite())
        .map(|v| v.log10());
    let (lo, hi) = logs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return write_png(path, &rgb, W, H);
    }
    let span = (hi - lo).max(1e-6);
    for (ci, curve) in curves.iter().enumerate() {
        let colour = COLOURS[ci % COLOURS.len()];
        let n = curve.len().max(2);
        let mut prev: Option<(usize, usize)> = None;
        for (i, v) in curve.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                prev = None;
                continue;
            }
            let x = PAD + i * (W - 2 * PAD - 1) / (n - 1);
            let y = PAD + ((hi - v.log10()) / span * (H - 2 * PAD - 1) as f64).round() as usize;
            if let Some((px, py)) = prev {
                let n = px.abs_diff(x).max(py.abs_diff(y)).max(1);
                for k in 0..=n {
                    let f = k as f64 / n as f64;
                    let xx = (px as f64 + f * (x as f64 - px as f64)).round() as usize;
                    let yy = (py as f64 + f * (y as f64 - py as f64)).round() as usize;
                    let p = (yy * W + xx) * 3;
                    rgb[p..p + 3].copy_from_slice(&colour);
                }
            }
            prev = Some((x, y));
        }
    }
    write_png(path, &rgb, W, H)
}

/// Tiles equally sized images into a grid, one row per inner vector.
pub fn image_grid(rows: &[Vec<&ImageTensor>], path: &Path) -> Result<()> {
    const GAP: usize = 2;
    let (h, w) = rows[0][0].dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
    let gw = cols * (w + GAP) + GAP;
    let gh = rows.len() * (h + GAP) + GAP;
    let mut rgb = vec![255u8; gw * gh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            let (oy, ox) = (GAP + r * (h + GAP), GAP + c * (w + GAP));
            for ((y, x, ch), v) in im.data().indexed_iter() {
                rgb[((oy + y) * gw + ox + x) * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    write_png(path, &rgb, gw, gh)
}
