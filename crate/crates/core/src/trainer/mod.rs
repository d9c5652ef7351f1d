//! Two-phase training: single-modality pretraining, then fusion finetuning
//! with the appearance stream frozen.
//!
//! Every step draws its batch, augmentation, negative examples and loss
//! points from an RNG seeded by `(seed, step)`, so a run resumed from a
//! checkpoint continues exactly where it stopped.

mod augment;
mod data;
pub mod desk;
mod optim;

pub use augment::{augment, crop_sample, flip_sample, scale_sample, AugmentConfig, MIN_CROP};
pub use data::{
    build_batch, load_dir, motion_stats, predict_frames, rgb_chw, sample_targets, Batch, SampleSource, TargetKind,
};
pub use optim::{clip_factor, global_norm, AdamW, StepInfo};

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, MetricReport};
use crate::fusion::{Checkpoint, FusionConfig, FusionModel, Stream};
use crate::losses::{total_loss, LossTerms, LossWeights, PointConfig};
use crate::motionrep::MotionStats;
use crate::synthscene::SceneSample;
use crate::{Error, Result};

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_mult: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// First epoch trained at `lr * 0.1`.
    pub drop_epoch: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub p_neg: f64,
    pub source: SampleSource,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub points: PointConfig,
    /// Targets; by default movable bodies for the appearance stream alone
    /// and moving bodies otherwise.
    pub target: Option<TargetKind>,
    /// Samples drawn to estimate motion statistics.
    pub stats_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    /// Single-modality phase: 30 epochs, rate drop after 24.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            backbone_lr_mult: 0.1,
            clip_norm: 0.1,
            epochs: 30,
            drop_epoch: 24,
            samples_per_epoch: 500,
            batch_size: 8,
            p_neg: 0.0,
            source: SampleSource::Mix(crate::synthscene::DatasetMix::single("default", Default::default())),
            seed: 0,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            points: PointConfig::default(),
            target: None,
            stats_samples: 32,
        }
    }

    /// Fusion phase: 10 epochs, rate drop after 8, 30% negative examples.
    pub fn finetune() -> Self {
        Self { epochs: 10, drop_epoch: 8, p_neg: 0.3, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_neg) {
            return Err(Error::InvalidConfig(format!("p_neg = {} outside [0, 1]", self.p_neg)));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::InvalidConfig("batch size and samples per epoch must be positive".into()));
        }
        if self.clip_norm <= 0.0 || self.weight_decay < 0.0 || self.backbone_lr_mult < 0.0 {
            return Err(Error::InvalidConfig(
                "clip_norm > 0, weight_decay >= 0, backbone_lr_mult >= 0 required".into(),
            ));
        }
        self.loss.validate()?;
        self.points.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// Base learning rate of `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Learning rate of parameter `name` in `epoch`.
    pub fn param_lr(&self, name: &str, epoch: usize) -> f64 {
        let lr = self.lr_at_epoch(epoch);
        if FusionModel::is_backbone_param(name) {
            lr * self.backbone_lr_mult
        } else {
            lr
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms,
    pub grad_norm: f64,
    pub negatives: usize,
}

/// Parameters updated during finetuning: everything outside the appearance
/// stream, plus the appearance class head.
pub fn finetune_trainable(name: &str) -> bool {
    !name.starts_with("rgb.") || name.contains(".class_head.")
}

pub struct Trainer {
    pub model: FusionModel,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
    pub target: TargetKind,
    pub stats: Option<MotionStats>,
    pub log: Vec<LogEntry>,
    pub phase: Phase,
}

/// Which parameters a trainer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Every parameter.
    Pretrain,
    /// See [`finetune_trainable`].
    Finetune,
}

impl Phase {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            Phase::Pretrain => true,
            Phase::Finetune => finetune_trainable(name),
        }
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

impl Trainer {
    pub fn new(model: FusionModel, cfg: TrainConfig, stats: Option<MotionStats>, phase: Phase) -> Result<Self> {
        cfg.validate()?;
        let target = cfg.target.unwrap_or(if model.cfg.streams() == [Stream::Appearance] {
            TargetKind::Movable
        } else {
            TargetKind::Moving
        });
        let opt = AdamW::new(cfg.weight_decay);
        Ok(Self { model, cfg, opt, step: 0, target, stats, log: vec![], phase })
    }

    /// Draws one batch from `rng`.
    pub fn draw_batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let s = self.cfg.source.draw(rng)?;
            samples.push(augment(&s, &self.cfg.augment, rng)?);
        }
        build_batch(
            &samples,
            &self.model.cfg,
            self.target,
            self.stats.as_ref(),
            self.cfg.p_neg,
            self.model.dtype(),
            rng,
        )
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.cfg.steps_per_epoch()
    }

    /// Loss of `step`'s batch under the current parameters, without updating.
    pub fn peek_loss(&self, step: usize) -> Result<f64> {
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = self.draw_batch(&mut rng)?;
        let out = self.model.forward(&batch.input, None)?;
        let loss = total_loss(&out.predictions, &batch.targets, &self.cfg.loss, &self.cfg.points, &mut rng)?;
        crate::nn::scalar(&loss.total)
    }

    pub fn train_step(&mut self) -> Result<LogEntry> {
        let step = self.step;
        let epoch = self.epoch_of(step);
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = self.draw_batch(&mut rng)?;
        let out = self.model.forward(&batch.input, None)?;
        let loss = match total_loss(&out.predictions, &batch.targets, &self.cfg.loss, &self.cfg.points, &mut rng) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let value = crate::nn::scalar(&loss.total)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = loss.total.backward()?;
        let phase = self.phase;
        let cfg = &self.cfg;
        let info = self.opt.step(&self.model.params, &grads, cfg.clip_norm, |name| {
            phase.trainable(name).then(|| cfg.param_lr(name, epoch))
        })?;
        let entry = LogEntry {
            step,
            epoch,
            lr: cfg.lr_at_epoch(epoch),
            loss: value,
            terms: loss.terms,
            grad_norm: info.grad_norm,
            negatives: batch.negatives,
        };
        self.step += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs `n` steps, appending each log line to `sink`.
    pub fn run(&mut self, n: usize, mut sink: Option<&mut dyn Write>) -> Result<()> {
        for _ in 0..n {
            let e = self.train_step()?;
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &e)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Runs the remaining steps of the configured schedule.
    pub fn run_to_end(&mut self, sink: Option<&mut dyn Write>) -> Result<()> {
        let left = self.cfg.total_steps().saturating_sub(self.step);
        self.run(left, sink)
    }

    pub fn evaluate(&self, samples: &[SceneSample]) -> Result<MetricReport> {
        evaluate(&predict_frames(&self.model, samples, self.target, self.stats.as_ref())?)
    }

    fn meta(&self, metrics: Option<&MetricReport>) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "train_config": self.cfg,
            "step": self.step,
            "target": self.target,
            "motion_stats": self.stats,
            "phase": self.phase,
            "metrics": metrics,
        }))
    }

    /// Model checkpoint carrying the training state in its metadata.
    pub fn checkpoint(&self, metrics: Option<&MetricReport>) -> Result<Checkpoint> {
        self.model.to_checkpoint(self.meta(metrics)?)
    }

    /// Writes model and optimizer checkpoints into `dir`.
    pub fn save(&self, dir: &Path, metrics: Option<&MetricReport>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint(metrics)?.save(&dir.join(MODEL_FILE))?;
        self.opt.to_checkpoint()?.save(&dir.join(OPTIM_FILE))
    }

    /// Restores a trainer saved by [`Self::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(&dir.join(MODEL_FILE))?;
        let model = FusionModel::from_checkpoint(&ck, DType::F32)?;
        let cfg: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())?;
        let stats: Option<MotionStats> = serde_json::from_value(ck.meta["motion_stats"].clone())?;
        let phase: Phase = serde_json::from_value(ck.meta["phase"].clone())?;
        let mut t = Self::new(model, cfg, stats, phase)?;
        t.target = serde_json::from_value(ck.meta["target"].clone())?;
        t.step = ck.meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))? as usize;
        t.opt = AdamW::from_checkpoint(&Checkpoint::load(&dir.join(OPTIM_FILE))?, DType::F32)?;
        Ok(t)
    }
}

/// Motion statistics estimated from the training source, when the model
/// has a motion stream.
pub fn estimate_stats(model_cfg: &FusionConfig, cfg: &TrainConfig) -> Result<Option<MotionStats>> {
    let crate::fusion::Modality::Motion(kind) = model_cfg.modality else {
        return Ok(None);
    };
    let mut rng = step_rng(cfg.seed, usize::MAX - 1);
    let samples: Vec<SceneSample> =
        (0..cfg.stats_samples.max(1)).map(|_| cfg.source.draw(&mut rng)).collect::<Result<_>>()?;
    Ok(Some(motion_stats(&samples, kind)?))
}

/// A fresh one-stream trainer.
pub fn single_trainer(model_cfg: FusionConfig, cfg: TrainConfig) -> Result<Trainer> {
    if model_cfg.mechanism.is_fused() {
        return Err(Error::InvalidConfig(format!(
            "pretraining needs a single-stream model, got {}",
            model_cfg.mechanism
        )));
    }
    let stats = estimate_stats(&model_cfg, &cfg)?;
    let model = FusionModel::new(model_cfg, cfg.seed, DType::F32)?;
    Trainer::new(model, cfg, stats, Phase::Pretrain)
}

/// Trains a one-stream model for the full schedule; with `out`, writes the
/// checkpoint, the optimizer state and the JSON-lines log there.
pub fn pretrain_single(model_cfg: FusionConfig, cfg: TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut t = single_trainer(model_cfg, cfg)?;
    run_and_save(&mut t, out)?;
    Ok(t)
}

fn run_and_save(t: &mut Trainer, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join(LOG_FILE))?);
            t.run_to_end(Some(&mut log))?;
            log.flush()?;
            t.save(dir, None)
        }
        None => t.run_to_end(None),
    }
}

fn check_compatible(fused: &FusionConfig, single: &FusionConfig, which: &str) -> Result<()> {
    let same = fused.d_model == single.d_model
        && fused.d_ffn == single.d_ffn
        && fused.n_heads == single.n_heads
        && fused.n_enc_layers == single.n_enc_layers
        && fused.n_dec_layers == single.n_dec_layers
        && fused.n_queries == single.n_queries
        && fused.n_points == single.n_points
        && fused.in_proj_dim == single.in_proj_dim
        && fused.backbone_widths == single.backbone_widths;
    if !same {
        return Err(Error::Checkpoint(format!("{which} checkpoint architecture differs from the fusion config")));
    }
    Ok(())
}

/// A fusion trainer initialized from the two single-modality checkpoints:
/// appearance stream frozen except its class head, both class heads
/// re-initialized, motion stream and fusion parameters trainable.
pub fn fusion_trainer(
    rgb: &Checkpoint,
    motion: &Checkpoint,
    model_cfg: FusionConfig,
    cfg: TrainConfig,
) -> Result<Trainer> {
    if !model_cfg.mechanism.is_fused() {
        return Err(Error::InvalidConfig("finetuning needs a fused mechanism".into()));
    }
    let rgb_cfg: FusionConfig = serde_json::from_value(rgb.config.clone())?;
    let mot_cfg: FusionConfig = serde_json::from_value(motion.config.clone())?;
    if rgb_cfg.streams() != [Stream::Appearance] {
        return Err(Error::Checkpoint("first checkpoint is not an appearance-only model".into()));
    }
    if mot_cfg.streams() != [Stream::Motion] || mot_cfg.modality != model_cfg.modality {
        return Err(Error::Checkpoint(format!(
            "second checkpoint has modality {}, fusion config wants {}",
            mot_cfg.modality, model_cfg.modality
        )));
    }
    check_compatible(&model_cfg, &rgb_cfg, "appearance")?;
    check_compatible(&model_cfg, &mot_cfg, "motion")?;
    let model = FusionModel::new(model_cfg, cfg.seed, DType::F32)?;
    model.load_params(rgb, "rgb.", "rgb.")?;
    model.load_params(motion, "motion.", "motion.")?;
    for head in ["rgb.decoder.class_head.", "motion.decoder.class_head."] {
        let bound = 1.0 / (model.cfg.d_model as f64).sqrt();
        model.params.reinit(head, cfg.seed ^ 0xc1a55, |_, _| crate::nn::Init::Uniform(bound))?;
    }
    let stats: Option<MotionStats> = serde_json::from_value(motion.meta["motion_stats"].clone())?;
    if stats.is_none() {
        return Err(Error::Checkpoint("motion checkpoint lacks motion statistics".into()));
    }
    let target = cfg.target;
    let mut t = Trainer::new(model, cfg, stats, Phase::Finetune)?;
    t.target = target.unwrap_or(TargetKind::Moving);
    Ok(t)
}

/// Runs the full finetuning schedule; see [`fusion_trainer`].
pub fn finetune_fusion(
    rgb: &Checkpoint,
    motion: &Checkpoint,
    model_cfg: FusionConfig,
    cfg: TrainConfig,
    out: Option<&Path>,
) -> Result<Trainer> {
    let mut t = fusion_trainer(rgb, motion, model_cfg, cfg)?;
    run_and_save(&mut t, out)?;
    Ok(t)
}
