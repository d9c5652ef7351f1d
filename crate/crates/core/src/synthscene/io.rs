//! On-disk dataset format.
//!
//! One directory per sample:
//!
//! | file             | content                                                         |
//! |------------------|-----------------------------------------------------------------|
//! | `frame1.png`     | 8-bit RGB                                                       |
//! | `frame2.png`     | 8-bit RGB                                                       |
//! | `flow.flo`       | Middlebury: `PIEH`, i32 width, i32 height, LE f32 `(u, v)` rows |
//! | `depth1.f32`     | u32 H, u32 W, then `H*W` LE f32                                 |
//! | `depth2.f32`     | same                                                            |
//! | `scene_flow.f32` | u32 H, u32 W, then `H*W*6` LE f32, channels innermost           |
//! | `masks.png`      | 16-bit grayscale instance ids                                   |
//! | `meta.json`      | labels, movability, tags, camera and bodies                     |
//!
//! Flow at invalid pixels is written as `1e10` (the Middlebury "unknown" value).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::body::RigidBody;
use super::camera::CameraModel;
use super::generator::{DegeneracyTag, SceneSample};
use crate::{Error, Result};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
const UNKNOWN_FLOW: f32 = 1e10;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    motion_labels: BTreeMap<u16, bool>,
    movable: BTreeMap<u16, bool>,
    degeneracy_tags: BTreeSet<DegeneracyTag>,
    camera: CameraModel,
    bodies: Vec<RigidBody>,
}

pub fn write_flo(path: &Path, flow: &Array3<f32>, valid: Option<&Array2<bool>>) -> Result<()> {
    let (h, w, c) = flow.dim();
    if c != 2 {
        return Err(Error::Shape(format!("flow must have 2 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let ok = valid.is_none_or(|v| v[[y, x]]);
            for k in 0..2 {
                let v = if ok { flow[[y, x, k]] } else { UNKNOWN_FLOW };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a `.flo` file. Pixels holding the unknown marker come back invalid.
pub fn read_flo(path: &Path) -> Result<(Array3<f32>, Array2<bool>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + h * w * 8 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", 12 + h * w * 8, bytes.len())));
    }
    let vals = le_f32s(&bytes[12..]);
    let flow = Array3::from_shape_vec((h, w, 2), vals).map_err(|e| Error::format(path, e.to_string()))?;
    let valid = Array2::from_shape_fn((h, w), |(y, x)| flow[[y, x, 0]].abs() < 1e9 && flow[[y, x, 1]].abs() < 1e9);
    let flow = Array3::from_shape_fn((h, w, 2), |(y, x, k)| if valid[[y, x]] { flow[[y, x, k]] } else { 0.0 });
    Ok((flow, valid))
}

fn le_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Raw float grid: u32 H, u32 W, then `H * W * channels` LE f32.
pub fn write_raw(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + data.len() * 4);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `(h, w, values)`; the channel count is `values.len() / (h * w)`.
pub fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if h == 0 || w == 0 || body.len() % 4 != 0 || (body.len() / 4) % (h * w) != 0 {
        return Err(Error::format(path, format!("payload of {} bytes does not fit {h}x{w}", body.len())));
    }
    Ok((h, w, le_f32s(body)))
}

fn write_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, _) = img.dim();
    let out: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    out.save(path)?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn write_masks_png(path: &Path, masks: &Array2<u16>) -> Result<()> {
    let (h, w) = masks.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([masks[[y as usize, x as usize]]]));
    img.save(path)?;
    Ok(())
}

pub fn read_masks_png(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

/// Writes every file of one sample into `dir` (created if needed).
pub fn write_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (sample.height(), sample.width());
    write_rgb(&dir.join("frame1.png"), &sample.frames[0])?;
    write_rgb(&dir.join("frame2.png"), &sample.frames[1])?;
    write_flo(&dir.join("flow.flo"), &sample.flow_fwd, Some(&sample.flow_valid))?;
    write_raw(&dir.join("depth1.f32"), sample.depth[0].as_standard_layout().as_slice().unwrap(), h, w)?;
    write_raw(&dir.join("depth2.f32"), sample.depth[1].as_standard_layout().as_slice().unwrap(), h, w)?;
    write_raw(&dir.join("scene_flow.f32"), sample.scene_flow.as_standard_layout().as_slice().unwrap(), h, w)?;
    write_masks_png(&dir.join("masks.png"), &sample.instance_masks)?;
    let meta = Meta {
        motion_labels: sample.motion_labels.clone(),
        movable: sample.movable.clone(),
        degeneracy_tags: sample.degeneracy_tags.clone(),
        camera: sample.camera.clone(),
        bodies: sample.bodies.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Loads a sample written by [`write_sample`]. Frames come back quantized to
/// 8 bits.
pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let frame1 = read_rgb(&dir.join("frame1.png"))?;
    let frame2 = read_rgb(&dir.join("frame2.png"))?;
    let (flow, valid) = read_flo(&dir.join("flow.flo"))?;
    let (h, w, _) = flow.dim();
    let grid = |name: &str, ch: usize| -> Result<Vec<f32>> {
        let path = dir.join(name);
        let (gh, gw, vals) = read_raw(&path)?;
        if (gh, gw) != (h, w) || vals.len() != h * w * ch {
            return Err(Error::format(&path, format!("expected {h}x{w}x{ch}")));
        }
        Ok(vals)
    };
    let depth1 = Array2::from_shape_vec((h, w), grid("depth1.f32", 1)?).expect("checked size");
    let depth2 = Array2::from_shape_vec((h, w), grid("depth2.f32", 1)?).expect("checked size");
    let scene_flow = Array3::from_shape_vec((h, w, 6), grid("scene_flow.f32", 6)?).expect("checked size");
    let masks = read_masks_png(&dir.join("masks.png"))?;
    if masks.dim() != (h, w) || frame1.dim() != (h, w, 3) || frame2.dim() != (h, w, 3) {
        return Err(Error::format(dir, "image sizes disagree with flow"));
    }
    Ok(SceneSample {
        frames: [frame1, frame2],
        flow_fwd: flow,
        flow_valid: valid,
        depth: [depth1, depth2],
        scene_flow,
        instance_masks: masks,
        motion_labels: meta.motion_labels,
        movable: meta.movable,
        degeneracy_tags: meta.degeneracy_tags,
        camera: meta.camera,
        bodies: meta.bodies,
    })
}

/// Sample directory name for index `i`.
pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:06}")
}

/// Lists sample directories under `root` in name order.
pub fn list_samples(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Missing(root.to_path_buf()));
    }
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}
