//! Joint geometric augmentation of a generated sample: random scaling,
//! cropping and horizontal flipping applied consistently to frames, flow,
//! scene flow, depth, validity and instance masks.

use nalgebra::Matrix3;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthscene::SceneSample;
use crate::{Error, Result};

/// Smallest accepted crop side.
pub const MIN_CROP: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Uniform range of the scale factor. The scaled image is cropped back
    /// to `crop` (or the input size), so factors below 1 are clamped to 1.
    pub scale: [f64; 2],
    /// Output `(height, width)`; the input size when absent.
    pub crop: Option<[usize; 2]>,
    pub p_flip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, scale: [1.0, 1.5], crop: None, p_flip: 0.5 }
    }
}

fn src_coord(dst: usize, factor: f64, n: usize) -> f64 {
    ((dst as f64 + 0.5) / factor - 0.5).clamp(0.0, (n - 1) as f64)
}

fn nearest(dst: usize, factor: f64, n: usize) -> usize {
    (((dst as f64 + 0.5) / factor).floor() as usize).min(n - 1)
}

fn bilinear3(a: &Array3<f32>, nh: usize, nw: usize, factor: f64) -> Array3<f32> {
    let (h, w, c) = a.dim();
    Array3::from_shape_fn((nh, nw, c), |(y, x, k)| {
        let (fy, fx) = (src_coord(y, factor, h), src_coord(x, factor, w));
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ay, ax) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
        (1.0 - ay) * ((1.0 - ax) * a[[y0, x0, k]] + ax * a[[y0, x1, k]])
            + ay * ((1.0 - ax) * a[[y1, x0, k]] + ax * a[[y1, x1, k]])
    })
}

fn nearest3<T: Clone>(a: &Array3<T>, nh: usize, nw: usize, factor: f64) -> Array3<T> {
    let (h, w, c) = a.dim();
    Array3::from_shape_fn((nh, nw, c), |(y, x, k)| a[[nearest(y, factor, h), nearest(x, factor, w), k]].clone())
}

fn nearest2<T: Clone>(a: &Array2<T>, nh: usize, nw: usize, factor: f64) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((nh, nw), |(y, x)| a[[nearest(y, factor, h), nearest(x, factor, w)]].clone())
}

/// Resizes by `factor`; pixel flow vectors scale with the image.
pub fn scale_sample(s: &SceneSample, factor: f64) -> Result<SceneSample> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidConfig(format!("scale factor {factor}")));
    }
    let nh = ((s.height() as f64 * factor).round() as usize).max(1);
    let nw = ((s.width() as f64 * factor).round() as usize).max(1);
    let mut out = s.clone();
    out.frames = [bilinear3(&s.frames[0], nh, nw, factor), bilinear3(&s.frames[1], nh, nw, factor)];
    out.flow_fwd = bilinear3(&s.flow_fwd, nh, nw, factor).mapv(|v| v * factor as f32);
    out.flow_valid = nearest2(&s.flow_valid, nh, nw, factor);
    out.depth = [nearest2(&s.depth[0], nh, nw, factor), nearest2(&s.depth[1], nh, nw, factor)];
    out.scene_flow = nearest3(&s.scene_flow, nh, nw, factor);
    out.instance_masks = nearest2(&s.instance_masks, nh, nw, factor);
    let cam = &mut out.camera;
    cam.focal *= factor;
    cam.principal_point = cam.principal_point.map(|p| (p + 0.5) * factor - 0.5);
    cam.image_size = (nh, nw);
    Ok(out)
}

/// Window `[y0, y0 + h) x [x0, x0 + w)`.
pub fn crop_sample(s: &SceneSample, y0: usize, x0: usize, h: usize, w: usize) -> Result<SceneSample> {
    if h < MIN_CROP || w < MIN_CROP {
        return Err(Error::InvalidConfig(format!("crop {h}x{w} below {MIN_CROP}x{MIN_CROP}")));
    }
    if y0 + h > s.height() || x0 + w > s.width() {
        return Err(Error::InvalidConfig(format!("crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}", s.height(), s.width())));
    }
    let c3 = |a: &Array3<f32>| a.slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..]).to_owned();
    let mut out = s.clone();
    out.frames = [c3(&s.frames[0]), c3(&s.frames[1])];
    out.flow_fwd = c3(&s.flow_fwd);
    out.scene_flow = c3(&s.scene_flow);
    out.flow_valid = s.flow_valid.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned();
    out.depth = s.depth.clone().map(|d| d.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned());
    out.instance_masks = s.instance_masks.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned();
    let cam = &mut out.camera;
    cam.principal_point = [cam.principal_point[0] - x0 as f64, cam.principal_point[1] - y0 as f64];
    cam.image_size = (h, w);
    Ok(out)
}

/// Mirror about the vertical centre line. Horizontal flow is negated; scene
/// flow is conjugated by the mirror `diag(-1, 1, 1)`, which maps the
/// rotation vector `(wx, wy, wz)` to `(wx, -wy, -wz)` and the translation
/// `(tx, ty, tz)` to `(-tx, ty, tz)`.
pub fn flip_sample(s: &SceneSample) -> SceneSample {
    let flip3 = |a: &Array3<f32>| a.slice(ndarray::s![.., ..;-1, ..]).to_owned();
    let flip2 = |a: &Array2<f32>| a.slice(ndarray::s![.., ..;-1]).to_owned();
    let mut out = s.clone();
    out.frames = [flip3(&s.frames[0]), flip3(&s.frames[1])];
    out.flow_fwd = flip3(&s.flow_fwd);
    out.flow_fwd.index_axis_mut(ndarray::Axis(2), 0).mapv_inplace(|v| -v);
    out.scene_flow = flip3(&s.scene_flow);
    for k in [1, 2, 3] {
        out.scene_flow.index_axis_mut(ndarray::Axis(2), k).mapv_inplace(|v| -v);
    }
    out.flow_valid = s.flow_valid.slice(ndarray::s![.., ..;-1]).to_owned();
    out.depth = [flip2(&s.depth[0]), flip2(&s.depth[1])];
    out.instance_masks = s.instance_masks.slice(ndarray::s![.., ..;-1]).to_owned();
    let cam = &mut out.camera;
    cam.principal_point[0] = (s.width() - 1) as f64 - cam.principal_point[0];
    let m = Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, 1.0, 1.0));
    cam.pose_delta.rotation = m * cam.pose_delta.rotation * m;
    cam.pose_delta.translation.x = -cam.pose_delta.translation.x;
    out
}

/// Random scale, crop back to the configured size, and random flip. The
/// sample's `bodies` keep describing the un-augmented scene.
pub fn augment<R: Rng + ?Sized>(s: &SceneSample, cfg: &AugmentConfig, rng: &mut R) -> Result<SceneSample> {
    let [ch, cw] = cfg.crop.unwrap_or([s.height(), s.width()]);
    if ch < MIN_CROP || cw < MIN_CROP {
        return Err(Error::InvalidConfig(format!("crop {ch}x{cw} below {MIN_CROP}x{MIN_CROP}")));
    }
    if !cfg.enabled {
        return Ok(s.clone());
    }
    let (lo, hi) = (cfg.scale[0].max(1.0), cfg.scale[1].max(1.0));
    let factor = if hi > lo { rng.random_range(lo..hi) } else { lo };
    // never scale below the crop window
    let factor = factor.max(ch as f64 / s.height() as f64).max(cw as f64 / s.width() as f64);
    let mut out = if (factor - 1.0).abs() > 1e-12 { scale_sample(s, factor)? } else { s.clone() };
    let y0 = rng.random_range(0..=out.height() - ch);
    let x0 = rng.random_range(0..=out.width() - cw);
    if (y0, x0, ch, cw) != (0, 0, out.height(), out.width()) {
        out = crop_sample(&out, y0, x0, ch, cw)?;
    }
    if rng.random_bool(cfg.p_flip.clamp(0.0, 1.0)) {
        out = flip_sample(&out);
    }
    Ok(out)
}
