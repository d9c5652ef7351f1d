//! Motion inputs for the motion stream.
//!
//! Covers the three encodings (2-channel optical flow, 6-channel scene flow,
//! generic D-channel embedding), per-channel statistics and standardization,
//! negative-example augmentation and scale/shift depth alignment.

mod align;
mod negative;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use align::{align_depth, DepthAlignment};
pub use negative::{apply_negative, channel_variance, NegativeAugConfig};

use crate::synthscene::SceneSample;
use crate::{Error, Result};

/// Channel count of the generic embedding unless configured otherwise.
pub const DEFAULT_EMBEDDING_CHANNELS: usize = 28;

/// Seed of the fixed projection behind [`MotionKind::Embedding`].
const EMBEDDING_SEED: u64 = 0x6d6f_7469_6f6e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionKind {
    OpticalFlow,
    SceneFlow,
    Embedding { channels: usize },
}

impl MotionKind {
    pub fn channels(self) -> usize {
        match self {
            MotionKind::OpticalFlow => 2,
            MotionKind::SceneFlow => 6,
            MotionKind::Embedding { channels } => channels,
        }
    }

    pub fn name(self) -> String {
        match self {
            MotionKind::OpticalFlow => "optical_flow".into(),
            MotionKind::SceneFlow => "scene_flow".into(),
            MotionKind::Embedding { channels } => format!("embedding{channels}"),
        }
    }
}

/// Dense motion input `H x W x C` with the per-channel `(min, max)` range
/// observed over the training mix.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub kind: MotionKind,
    pub data: Array3<f32>,
    pub value_range: Vec<(f32, f32)>,
}

impl MotionField {
    pub fn new(kind: MotionKind, data: Array3<f32>, value_range: Vec<(f32, f32)>) -> Result<Self> {
        let c = data.dim().2;
        if c != kind.channels() {
            return Err(Error::Shape(format!("{} expects {} channels, data has {c}", kind.name(), kind.channels())));
        }
        if value_range.len() != c {
            return Err(Error::Shape(format!("value range has {} channels, data has {c}", value_range.len())));
        }
        if let Some((i, r)) = value_range.iter().enumerate().find(|(_, r)| !(r.0 <= r.1)) {
            return Err(Error::InvalidConfig(format!("channel {i} range {r:?} has min > max")));
        }
        Ok(Self { kind, data, value_range })
    }

    /// Field whose range is its own per-channel extent.
    pub fn with_own_range(kind: MotionKind, data: Array3<f32>) -> Result<Self> {
        let range = channel_extent(&data);
        Self::new(kind, data, range)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

fn channel_extent(data: &Array3<f32>) -> Vec<(f32, f32)> {
    data.axis_iter(Axis(2))
        .map(|ch| ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect()
}

/// Raw motion data of `kind` for a generated sample.
pub fn motion_data(sample: &SceneSample, kind: MotionKind) -> Array3<f32> {
    match kind {
        MotionKind::OpticalFlow => sample.flow_fwd.clone(),
        MotionKind::SceneFlow => sample.scene_flow.clone(),
        MotionKind::Embedding { channels } => embed(sample, channels),
    }
}

/// Fixed random linear map of per-pixel geometric features (flow, scene flow,
/// inverse depths) to `channels` outputs. Only the tensor shape matters to
/// the model; the map keeps the channels informative.
fn embed(sample: &SceneSample, channels: usize) -> Array3<f32> {
    const FEATURES: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_SEED);
    let proj: Vec<f32> = (0..channels * FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (h, w) = (sample.height(), sample.width());
    let mut out = Array3::<f32>::zeros((h, w, channels));
    for y in 0..h {
        for x in 0..w {
            let mut f = [0f32; FEATURES];
            f[0] = sample.flow_fwd[[y, x, 0]];
            f[1] = sample.flow_fwd[[y, x, 1]];
            for k in 0..6 {
                f[2 + k] = sample.scene_flow[[y, x, k]];
            }
            f[8] = 1.0 / sample.depth[0][[y, x]];
            f[9] = 1.0 / sample.depth[1][[y, x]];
            for c in 0..channels {
                out[[y, x, c]] = (0..FEATURES).map(|k| proj[c * FEATURES + k] * f[k]).sum();
            }
        }
    }
    out
}

/// Adds i.i.d. Gaussian noise of standard deviation `std` to every value.
pub fn add_noise<R: Rng + ?Sized>(data: &mut Array3<f32>, std: f32, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0f32, std).expect("std > 0");
    data.mapv_inplace(|v| v + normal.sample(rng));
}

/// Per-channel mean, standard deviation and extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl MotionStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Accumulates statistics over every pixel of every field. A constant
    /// channel gets std 1, so standardizing only centers it.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut lo: Vec<f32> = Vec::new();
        let mut hi: Vec<f32> = Vec::new();
        let mut n = 0usize;
        for field in fields {
            let c = field.dim().2;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
                lo = vec![f32::INFINITY; c];
                hi = vec![f32::NEG_INFINITY; c];
            } else if c != sum.len() {
                return Err(Error::Shape(format!("channel count changed from {} to {c}", sum.len())));
            }
            for px in field.lanes(Axis(2)) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                    lo[k] = lo[k].min(v);
                    hi[k] = hi[k].max(v);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("no pixels to compute motion statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0)).sqrt() as f32)
            .map(|s| if s > 0.0 { s } else { 1.0 })
            .collect();
        Ok(Self { mean: mean.iter().map(|&m| m as f32).collect(), std, min: lo, max: hi })
    }

    pub fn value_range(&self) -> Vec<(f32, f32)> {
        self.min.iter().copied().zip(self.max.iter().copied()).collect()
    }

    /// Standardization that leaves the field untouched (`mean 0`, `std 1`).
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels], min: vec![0.0; channels], max: vec![0.0; channels] }
    }
}

/// Name of the normalization sidecar in a dataset root.
pub const STATS_FILE: &str = "motion_stats.json";

pub fn save_stats(root: &Path, stats: &BTreeMap<String, MotionStats>) -> Result<()> {
    std::fs::write(root.join(STATS_FILE), serde_json::to_vec_pretty(stats)?)?;
    Ok(())
}

pub fn load_stats(root: &Path) -> Result<BTreeMap<String, MotionStats>> {
    let path = root.join(STATS_FILE);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn check_stats(c: usize, stats: &MotionStats) -> Result<()> {
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Shape(format!("stats have {} channels, field has {c}", stats.mean.len())));
    }
    if let Some(k) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig(format!("channel {k} has std {} (must be > 0)", stats.std[k])));
    }
    Ok(())
}

/// Per-channel `(x - mean) / std`.
pub fn normalize_motion(field: &MotionField, stats: &MotionStats) -> Result<Array3<f32>> {
    let c = field.data.dim().2;
    check_stats(c, stats)?;
    let mut out = field.data.clone();
    for (k, mut ch) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[k], stats.std[k]);
        ch.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

/// Inverse of [`normalize_motion`].
pub fn denormalize_motion(data: &Array3<f32>, stats: &MotionStats) -> Result<Array3<f32>> {
    check_stats(data.dim().2, stats)?;
    let mut out = data.clone();
    for (k, mut ch) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[k], stats.std[k]);
        ch.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

/// Channel-first copy `C x H x W`, the layout the model consumes.
pub fn to_chw(data: &Array3<f32>) -> Vec<f32> {
    data.view().permuted_axes([2, 0, 1]).as_standard_layout().iter().copied().collect()
}

/// Same as [`to_chw`] for a single-channel map.
pub fn plane(data: &Array2<f32>) -> Vec<f32> {
    data.as_standard_layout().iter().copied().collect()
}
