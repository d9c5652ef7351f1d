//! Desk-scale presets: a small model, synthetic mixes and schedules that
//! train on one CPU core in minutes. The full-scale defaults live in
//! [`FusionConfig::default`] and [`TrainConfig::pretrain`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fusion_trainer, single_trainer, SampleSource, TrainConfig, Trainer};
use crate::fusion::{FusionConfig, Mechanism, Modality};
use crate::losses::PointConfig;
use crate::synthscene::{sample_mix, CameraMotion, DatasetMix, GeneratorConfig, Layout, RandomLayout, SceneSample};
use crate::Result;

/// Image side of every desk preset.
pub const SIZE: usize = 48;

pub fn model(mechanism: Mechanism, modality: Modality) -> FusionConfig {
    FusionConfig {
        mechanism,
        modality,
        d_model: 32,
        d_ffn: 64,
        n_heads: 4,
        n_enc_layers: 1,
        n_dec_layers: 3,
        n_queries: 4,
        n_bottleneck: 2,
        n_points: 2,
        in_proj_dim: 8,
        backbone_widths: [16, 16, 32, 32],
        ..FusionConfig::default()
    }
}

/// Large, fast bodies under a static camera: motion alone separates them.
pub fn smoke_mix() -> DatasetMix {
    let layout = RandomLayout {
        movers: [1, 2],
        structures: [0, 0],
        radius_px: [7.0, 11.0],
        p_moving: 1.0,
        speed_px: [4.0, 8.0],
        ..Default::default()
    };
    DatasetMix::single(
        "smoke",
        GeneratorConfig {
            height: SIZE,
            width: SIZE,
            focal: SIZE as f64,
            camera: CameraMotion::Static,
            layout: Layout::Random(layout),
            ..Default::default()
        },
    )
}

/// Moving camera (translation magnitude drawn from `translation`) over
/// static structures; movable bodies move with probability `p_moving`, and
/// with probability `p_colinear` one of them translates along the camera
/// direction.
pub fn degenerate_mix(translation: [f64; 2], p_moving: f64, p_colinear: f64) -> DatasetMix {
    let layout = RandomLayout {
        movers: [1, 3],
        structures: [1, 2],
        depth: [4.0, 12.0],
        radius_px: [6.0, 10.0],
        p_moving,
        speed_px: [3.0, 7.0],
        p_colinear,
        ..Default::default()
    };
    DatasetMix::single(
        "degenerate",
        GeneratorConfig {
            height: SIZE,
            width: SIZE,
            focal: SIZE as f64,
            camera: CameraMotion::Random { translation, forward_weight: 0.5, max_rotation_deg: 1.0 },
            layout: Layout::Random(layout),
            ..Default::default()
        },
    )
}

/// Small ego-motion, so that flow separates moving bodies from static
/// movable ones, which make up `1 - p_moving` of the movable bodies.
pub fn distractor_mix(p_moving: f64) -> DatasetMix {
    degenerate_mix([0.1, 0.3], p_moving, 0.4)
}

/// Larger ego-motion, under which a body moving along the camera direction
/// is hard to tell from static geometry in 2D.
pub fn colinear_mix(p_colinear: f64) -> DatasetMix {
    degenerate_mix([0.3, 0.8], 0.6, p_colinear)
}

/// `steps` optimizer steps in 10 epochs, rate drop before the last two.
/// Uses a larger rate and no backbone reduction: desk backbones start from
/// random weights.
pub fn schedule(mix: DatasetMix, seed: u64, steps: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        backbone_lr_mult: 1.0,
        epochs: 10,
        drop_epoch: 8,
        samples_per_epoch: (steps / 10).max(1) * batch_size,
        batch_size,
        source: SampleSource::Mix(mix),
        seed,
        points: PointConfig { k: 256, ..Default::default() },
        ..TrainConfig::pretrain()
    }
}

/// `n` samples drawn from `mix` with a stream independent of training seeds.
pub fn test_set(mix: &DatasetMix, n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n).map(|_| Ok(sample_mix(mix, &mut rng)?.1)).collect()
}

/// Trains a one-stream model on `mix`.
pub fn pretrain(modality: Modality, mix: &DatasetMix, seed: u64, steps: usize) -> Result<Trainer> {
    let mut t = single_trainer(model(Mechanism::Single, modality), schedule(mix.clone(), seed, steps, 8))?;
    t.run_to_end(None)?;
    Ok(t)
}

/// Finetunes a fusion model from two pretrained one-stream trainers.
pub fn finetune(
    rgb: &Trainer,
    motion: &Trainer,
    mechanism: Mechanism,
    mix: &DatasetMix,
    p_neg: f64,
    seed: u64,
    steps: usize,
) -> Result<Trainer> {
    let cfg = TrainConfig { p_neg, ..schedule(mix.clone(), seed, steps, 8) };
    let mcfg = model(mechanism, motion.model.cfg.modality);
    let mut t = fusion_trainer(&rgb.checkpoint(None)?, &motion.checkpoint(None)?, mcfg, cfg)?;
    t.run_to_end(None)?;
    Ok(t)
}
