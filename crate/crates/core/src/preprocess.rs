//! Volume standardization: uniform-scale cubic resize with zero padding to
//! 128x128x64, followed by per-scan min-max normalization.

use ndarray::Array3;

use crate::dicom::load_dicom_series;
use crate::error::{Error, Result};
use crate::manifest::CaseRecord;
use crate::nifti::read_nifti;
use crate::volume::{Orientation, Volume};

pub const TARGET_SHAPE: (usize, usize, usize) = (128, 128, 64);

/// Catmull-Rom cubic convolution kernel (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Resample one axis so output index `i` samples input coordinate
/// `offset + i * step`, with edge clamping.
fn resample_axis(data: &Array3<f32>, axis: usize, new_len: usize, step: f64, offset: f64) -> Array3<f32> {
    let dims = data.dim();
    let old_len = [dims.0, dims.1, dims.2][axis];

    // per-output-index taps: 4 clamped source indices and kernel weights
    let mut taps: Vec<([usize; 4], [f64; 4])> = Vec::with_capacity(new_len);
    for i in 0..new_len {
        let x = offset + i as f64 * step;
        let base = x.floor() as isize;
        let mut idx = [0usize; 4];
        let mut w = [0.0f64; 4];
        for (t, (ii, ww)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
            let src = base - 1 + t as isize;
            *ii = src.clamp(0, old_len as isize - 1) as usize;
            *ww = cubic_weight(x - src as f64);
        }
        let sum: f64 = w.iter().sum();
        if sum != 0.0 {
            for ww in &mut w {
                *ww /= sum;
            }
        }
        taps.push((idx, w));
    }

    let mut out_dims = [dims.0, dims.1, dims.2];
    out_dims[axis] = new_len;
    let mut out = Array3::<f32>::zeros((out_dims[0], out_dims[1], out_dims[2]));
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let (idx, w) = &taps[[a, b, c][axis]];
                let mut acc = 0.0f64;
                for t in 0..4 {
                    let mut src = [a, b, c];
                    src[axis] = idx[t];
                    acc += w[t] * data[[src[0], src[1], src[2]]] as f64;
                }
                out[[a, b, c]] = acc as f32;
            }
        }
    }
    out
}

/// Uniform-scale cubic resample of the whole volume to `content` dims, where
/// `content[i] = round(dims[i] * scale)`.
fn scale_volume(data: &Array3<f32>, content: (usize, usize, usize), scale: f64) -> Array3<f32> {
    let step = 1.0 / scale;
    let offset = (step - 1.0) / 2.0; // aligns voxel centers
    let mut out = resample_axis(data, 0, content.0, step, offset);
    out = resample_axis(&out, 1, content.1, step, offset);
    resample_axis(&out, 2, content.2, step, offset)
}

/// Zoom about the volume center by `factor` (> 1 zooms in) keeping the
/// original shape; equivalent to scaling up then center-cropping.
pub fn zoom_center(data: &Array3<f32>, factor: f64) -> Array3<f32> {
    let dims = data.dim();
    let step = 1.0 / factor;
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = data.clone();
    for (axis, len) in [dims.0, dims.1, dims.2].into_iter().enumerate() {
        let center = (len as f64 - 1.0) / 2.0;
        let offset = center * (1.0 - step);
        out = resample_axis(&out, axis, len, step, offset);
    }
    out.mapv_inplace(|v| v.clamp(lo, hi));
    out
}

/// The deterministic geometry of a resize: scale factor, scaled content
/// dims, and symmetric padding (odd voxel on the high-index side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizePlan {
    pub scale: f64,
    pub content: (usize, usize, usize),
    pub pad_low: (usize, usize, usize),
    pub pad_high: (usize, usize, usize),
}

pub fn resize_plan(dims: (usize, usize, usize), target: (usize, usize, usize)) -> ResizePlan {
    let scale = (target.0 as f64 / dims.0 as f64)
        .min(target.1 as f64 / dims.1 as f64)
        .min(target.2 as f64 / dims.2 as f64);
    let round = |d: usize, t: usize| (((d as f64) * scale).round() as usize).clamp(1, t);
    let content = (round(dims.0, target.0), round(dims.1, target.1), round(dims.2, target.2));
    let pad = |c: usize, t: usize| {
        let total = t - c;
        (total / 2, total - total / 2)
    };
    let (l0, h0) = pad(content.0, target.0);
    let (l1, h1) = pad(content.1, target.1);
    let (l2, h2) = pad(content.2, target.2);
    ResizePlan { scale, content, pad_low: (l0, l1, l2), pad_high: (h0, h1, h2) }
}

/// Scale the canonical volume by the single factor `min(target_i / dim_i)`
/// with cubic interpolation, then zero-pad symmetrically to `target`.
pub fn resize_with_padding(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    if !v.orientation().is_canonical() {
        return Err(Error::Preprocess("volume must be canonical before resizing".into()));
    }
    let dims = v.shape();
    if dims.0 < 4 || dims.1 < 4 || dims.2 < 4 {
        return Err(Error::Preprocess(format!(
            "all input dims must be >= 4 for cubic interpolation, got {dims:?}"
        )));
    }
    let plan = resize_plan(dims, target);
    let mut scaled = scale_volume(v.data(), plan.content, plan.scale);

    // suppress cubic overshoot so normalization stays stable
    let lo = v.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    scaled.mapv_inplace(|x| x.clamp(lo, hi));

    let mut out = Array3::<f32>::zeros(target);
    let (pl, c) = (plan.pad_low, plan.content);
    out.slice_mut(ndarray::s![pl.0..pl.0 + c.0, pl.1..pl.1 + c.1, pl.2..pl.2 + c.2])
        .assign(&scaled);

    let sp = v.spacing();
    let spacing = [sp[0] / plan.scale, sp[1] / plan.scale, sp[2] / plan.scale];
    Volume::new(out, spacing, Orientation::Canonical)
}

/// Affinely map voxel values to [0, 1]; a constant volume maps to all zeros.
pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    let lo = v.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data().mapv(|x| (x - lo) / range)
    } else {
        Array3::zeros(v.shape())
    };
    Volume::new(data, v.spacing(), v.orientation())
}

/// Full per-case pipeline: read, canonicalize, resize, normalize.
pub fn preprocess_case(rec: &CaseRecord, target: (usize, usize, usize)) -> Result<Volume> {
    let run = || -> Result<Volume> {
        let raw = if rec.path.is_dir() {
            load_dicom_series(&rec.path)
        } else {
            read_nifti(&rec.path)
        }?;
        let canonical = raw.to_canonical_orientation()?;
        let resized = resize_with_padding(&canonical, target)?;
        minmax_normalize(&resized)
    };
    run().map_err(|e| e.for_case(&rec.case_id))
}
