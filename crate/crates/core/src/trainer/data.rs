//! Turning generated samples into model inputs and loss targets.

use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::eval::{extract_detections, Frame};
use crate::fusion::{FusionConfig, FusionModel, Modality, ModelInput, Stream};
use crate::motionrep::{apply_negative, motion_data, normalize_motion, MotionField, MotionKind, MotionStats};
use crate::synthscene::{io, sample_mix, DatasetMix, SceneSample};
use crate::{Error, Result};

/// Which instances count as targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Independently moving bodies.
    Moving,
    /// Every body of a movable category, moving or not.
    Movable,
}

/// Non-empty target masks of a sample.
pub fn sample_targets(s: &SceneSample, kind: TargetKind) -> Vec<Array2<bool>> {
    let masks = match kind {
        TargetKind::Moving => s.moving_masks(),
        TargetKind::Movable => s.movable_masks(),
    };
    masks.into_iter().map(|(_, m)| m).filter(|m| m.iter().any(|&v| v)).collect()
}

/// First frame as `3 x H x W`, centred around 0.
pub fn rgb_chw(s: &SceneSample) -> Vec<f32> {
    let (h, w) = (s.height(), s.width());
    let f = &s.frames[0];
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.push((f[[y, x, c]] - 0.5) * 4.0);
            }
        }
    }
    out
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Mix(DatasetMix),
    /// A directory written by the generator; samples are drawn uniformly.
    Dir(PathBuf),
}

impl SampleSource {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SceneSample> {
        match self {
            SampleSource::Mix(mix) => Ok(sample_mix(mix, rng)?.1),
            SampleSource::Dir(dir) => {
                let list = io::list_samples(dir)?;
                if list.is_empty() {
                    return Err(Error::Empty(format!("no samples under {}", dir.display())));
                }
                io::read_sample(&list[rng.random_range(0..list.len())])
            }
        }
    }
}

/// Loads every sample of a generated dataset directory.
pub fn load_dir(dir: &Path) -> Result<Vec<SceneSample>> {
    io::list_samples(dir)?.iter().map(|p| io::read_sample(p)).collect()
}

/// Per-channel statistics of the motion representation over `samples`.
pub fn motion_stats(samples: &[SceneSample], kind: MotionKind) -> Result<MotionStats> {
    let fields: Vec<_> = samples.iter().map(|s| motion_data(s, kind)).collect();
    MotionStats::from_fields(fields.iter())
}

fn motion_kind(cfg: &FusionConfig) -> Option<MotionKind> {
    match cfg.modality {
        Modality::Rgb => None,
        Modality::Motion(k) => cfg.streams().contains(&Stream::Motion).then_some(k),
    }
}

/// Model inputs plus loss targets for a batch.
pub struct Batch {
    pub input: ModelInput,
    pub targets: Vec<Vec<Array2<bool>>>,
    pub negatives: usize,
}

/// Stacks samples into a batch. With probability `p_neg` per sample the
/// motion input is replaced by a constant field inside the statistics'
/// value range and the targets are emptied.
pub fn build_batch<R: Rng + ?Sized>(
    samples: &[SceneSample],
    cfg: &FusionConfig,
    kind: TargetKind,
    stats: Option<&MotionStats>,
    p_neg: f64,
    dtype: DType,
    rng: &mut R,
) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if samples.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Shape("batch samples differ in size".into()));
    }
    let streams = cfg.streams();
    let mkind = motion_kind(cfg);
    let mut rgb = Vec::new();
    let mut motion = Vec::new();
    let mut targets = Vec::with_capacity(samples.len());
    let mut negatives = 0;
    for s in samples {
        let mut t = sample_targets(s, kind);
        if streams.contains(&Stream::Appearance) {
            rgb.extend(rgb_chw(s));
        }
        if let Some(k) = mkind {
            let st = stats.ok_or_else(|| Error::InvalidConfig("motion stream needs motion statistics".into()))?;
            let field = MotionField::new(k, motion_data(s, k), st.value_range())?;
            let (field, kept, neg) = apply_negative(field, t, p_neg, rng);
            t = kept;
            negatives += neg as usize;
            motion.extend(crate::motionrep::to_chw(&normalize_motion(&field, st)?));
        }
        targets.push(t);
    }
    let b = samples.len();
    let rgb = if rgb.is_empty() { None } else { Some(crate::nn::host(rgb, &[b, 3, h, w], dtype)?) };
    let motion = match mkind {
        Some(k) => Some(crate::nn::host(motion, &[b, k.channels(), h, w], dtype)?),
        None => None,
    };
    Ok(Batch { input: ModelInput { rgb, motion }, targets, negatives })
}

/// Runs the model on each sample and pairs its detections with targets.
pub fn predict_frames(
    model: &FusionModel,
    samples: &[SceneSample],
    kind: TargetKind,
    stats: Option<&MotionStats>,
) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let batch = build_batch(
            std::slice::from_ref(s),
            &model.cfg,
            kind,
            stats,
            0.0,
            model.dtype(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )?;
        let out = model.forward(&batch.input, None)?;
        let last = out.predictions.last().ok_or_else(|| Error::Empty("predictions".into()))?;
        frames.push(Frame {
            id: format!("{i:06}"),
            predictions: extract_detections(last, 0, s.height(), s.width())?,
            ground_truth: batch.targets.into_iter().next().unwrap_or_default(),
        });
    }
    Ok(frames)
}
