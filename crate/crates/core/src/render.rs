//! 2D slice rasters with an optional label overlay.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::volio::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Constant z.
    Axial,
    /// Constant y.
    Coronal,
    /// Constant x.
    Sagittal,
}

impl FromStr for Axis {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, RenderError> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "z" => Ok(Axis::Axial),
            "coronal" | "y" => Ok(Axis::Coronal),
            "sagittal" | "x" => Ok(Axis::Sagittal),
            _ => Err(RenderError::BadAxis(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("unknown axis {0:?}")]
    BadAxis(String),
    #[error("slice {index} out of range for {len} slices")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label grid {0:?} differs from image grid {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
}

/// Row-major RGBA8.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

pub const PALETTE: [(u8, [u8; 3]); 3] = [(1, [255, 0, 0]), (2, [0, 255, 0]), (4, [255, 255, 0])];
/// Prediction-only and truth-only colors for the disagreement view.
pub const PRED_ONLY: [u8; 3] = [255, 0, 255];
pub const TRUTH_ONLY: [u8; 3] = [0, 255, 255];

pub fn label_color(label: u8) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(l, _)| *l == label).map(|(_, c)| *c)
}

/// `(width, height, slice count)` of an axis.
pub fn slice_shape(dims: [usize; 3], axis: Axis) -> (usize, usize, usize) {
    let [nx, ny, nz] = dims;
    match axis {
        Axis::Axial => (nx, ny, nz),
        Axis::Coronal => (nx, nz, ny),
        Axis::Sagittal => (ny, nz, nx),
    }
}

/// Voxel index of raster pixel `(col, row)`. Axial rows run anterior to
/// posterior; the other views put superior at the top.
fn voxel(dims: [usize; 3], axis: Axis, index: usize, col: usize, row: usize) -> usize {
    let [nx, ny, nz] = dims;
    let (x, y, z) = match axis {
        Axis::Axial => (col, row, index),
        Axis::Coronal => (col, index, nz - 1 - row),
        Axis::Sagittal => (index, col, nz - 1 - row),
    };
    x + nx * (y + ny * z)
}

fn check_index(dims: [usize; 3], axis: Axis, index: usize) -> Result<(usize, usize), RenderError> {
    let (w, h, n) = slice_shape(dims, axis);
    if index >= n {
        return Err(RenderError::IndexOutOfRange { index, len: n });
    }
    Ok((w, h))
}

/// Values of one slice in raster order.
pub fn extract_slice(v: &Volume3D, axis: Axis, index: usize) -> Result<(usize, usize, Vec<f32>), RenderError> {
    let (w, h) = check_index(v.dims, axis, index)?;
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            out.push(v.data[voxel(v.dims, axis, index, col, row)]);
        }
    }
    Ok((w, h, out))
}

/// Grayscale mapping of the whole volume's min..max to 0..255.
pub fn gray_level(value: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return 0;
    }
    (((value - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn value_range(v: &Volume3D) -> (f32, f32) {
    v.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn blend(base: u8, color: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * base as f64 + alpha * color as f64).round() as u8
}

/// Renders slice `index` along `axis`. Labels not in the palette are left
/// uncolored; `alpha == 0` reproduces the plain image exactly.
pub fn render_slice(
    image: &Volume3D,
    labels: Option<&Volume3D>,
    axis: Axis,
    index: usize,
    alpha: f64,
) -> Result<Raster, RenderError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RenderError::BadAlpha(alpha));
    }
    if let Some(l) = labels {
        if l.dims != image.dims {
            return Err(RenderError::DimMismatch(l.dims, image.dims));
        }
    }
    let (w, h, vals) = extract_slice(image, axis, index)?;
    let (lo, hi) = value_range(image);
    let mut rgba = Vec::with_capacity(w * h * 4);
    for &v in &vals {
        let g = gray_level(v, lo, hi);
        rgba.extend_from_slice(&[g, g, g, 255]);
    }
    if let (Some(l), true) = (labels, alpha > 0.0) {
        let (_, _, labs) = extract_slice(l, axis, index)?;
        for (px, &lab) in rgba.chunks_exact_mut(4).zip(&labs) {
            if let Some(c) = label_color(lab.round() as u8) {
                for k in 0..3 {
                    px[k] = blend(px[k], c[k], alpha);
                }
            }
        }
    }
    Ok(Raster { width: w, height: h, rgba })
}

/// Marks voxels labeled (nonzero) in only one of `pred` and `truth` on top
/// of the image.
pub fn render_disagreement(
    image: &Volume3D,
    pred: &Volume3D,
    truth: &Volume3D,
    axis: Axis,
    index: usize,
    alpha: f64,
) -> Result<Raster, RenderError> {
    for l in [pred, truth] {
        if l.dims != image.dims {
            return Err(RenderError::DimMismatch(l.dims, image.dims));
        }
    }
    let mut r = render_slice(image, None, axis, index, alpha)?;
    let (_, _, p) = extract_slice(pred, axis, index)?;
    let (_, _, t) = extract_slice(truth, axis, index)?;
    for ((px, &a), &b) in r.rgba.chunks_exact_mut(4).zip(&p).zip(&t) {
        let c = match (a != 0.0, b != 0.0) {
            (true, false) => PRED_ONLY,
            (false, true) => TRUTH_ONLY,
            _ => continue,
        };
        for k in 0..3 {
            px[k] = blend(px[k], c[k], alpha);
        }
    }
    Ok(r)
}
