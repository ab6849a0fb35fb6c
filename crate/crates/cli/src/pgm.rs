//! Mid-slice images in binary portable graymap (P5) form.

use std::path::Path;

use lrp3d::Tensor;

use crate::error::{io_error, CliResult};

pub struct Slice {
    pub plane: &'static str,
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub values: Vec<f64>,
}

/// Axial, coronal and sagittal slices through the middle of a `D×H×W`
/// volume. Axial rows run along H; in the other two the top row is the
/// highest D index.
pub fn mid_slices(volume: &Tensor) -> [Slice; 3] {
    let s = volume.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let v = volume.data();
    let at = |z: usize, y: usize, x: usize| v[(z * h + y) * w + x];
    let (mz, my, mx) = (d / 2, h / 2, w / 2);
    let mut axial = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            axial.push(at(mz, y, x));
        }
    }
    let mut coronal = Vec::with_capacity(d * w);
    let mut sagittal = Vec::with_capacity(d * h);
    for z in (0..d).rev() {
        for x in 0..w {
            coronal.push(at(z, my, x));
        }
        for y in 0..h {
            sagittal.push(at(z, y, mx));
        }
    }
    [
        Slice {
            plane: "axial",
            width: w,
            height: h,
            values: axial,
        },
        Slice {
            plane: "coronal",
            width: w,
            height: d,
            values: coronal,
        },
        Slice {
            plane: "sagittal",
            width: h,
            height: d,
            values: sagittal,
        },
    ]
}

/// Nearest-rank percentile of `|values|`; 0 for an empty slice.
pub fn abs_percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * mags.len() as f64).ceil() as usize;
    mags[rank.clamp(1, mags.len()) - 1]
}

/// Zero maps to 128; `±scale` and beyond saturate at 0 and 255.
pub fn relevance_gray(values: &[f64], scale: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&r| {
            let u = if scale > 0.0 { (r / scale).clamp(-1.0, 1.0) } else { 0.0 };
            (127.5 + 127.5 * u).round() as u8
        })
        .collect()
}

/// Linear map of `[lo, hi]` onto `0..=255`.
pub fn intensity_gray(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|&x| {
            let u = if span > 0.0 {
                ((x - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (255.0 * u).round() as u8
        })
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}
