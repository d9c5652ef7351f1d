use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{alloc, RunConfig};
use crate::eval::{evaluate, read_dump, write_dump, Detection, DumpFrame, Frame, MetricReport};
use crate::fusion::{
    expected_pairs, AttnStats, Checkpoint, FusionModel, Mechanism, Modality, ModelInput, PairCounts, Stream,
};
use crate::motionrep::{MotionKind, MotionStats};
use crate::synthscene::{generate_scene, io, SceneSample};
use crate::trainer::{finetune_fusion, predict_frames, pretrain_single, sample_targets, TargetKind, Trainer};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const BENCH_FILE: &str = "bench.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub dir: String,
    pub source: String,
    pub scene_seed: u64,
    pub tags: Vec<String>,
}

/// Contents of `manifest.json` written by `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub n: usize,
    pub seed: u64,
    /// Samples per mix source.
    pub sources: BTreeMap<String, usize>,
    /// Samples per tag combination (`"colinear+static_movable"`); sums to `n`.
    pub tag_histogram: BTreeMap<String, usize>,
    /// Samples carrying each individual tag.
    pub tag_counts: BTreeMap<String, usize>,
    pub samples: Vec<SampleEntry>,
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidConfig(format!("{what} is required")))
}

/// Materializes `cfg.gen.mix` into `out`, which must be absent or empty. On
/// failure everything written is removed again.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<GenManifest> {
    cfg.gen.mix.validate()?;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::InvalidConfig(format!("output directory {} is not empty", out.display())));
    }
    let created = !out.exists();
    std::fs::create_dir_all(out)?;
    let result = generate_into(cfg, out);
    if result.is_err() {
        if created {
            let _ = std::fs::remove_dir_all(out);
        } else if let Ok(entries) = std::fs::read_dir(out) {
            for e in entries.flatten() {
                let p = e.path();
                let _ = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
            }
        }
    }
    result
}

fn generate_into(cfg: &RunConfig, out: &Path) -> Result<GenManifest> {
    let mix = &cfg.gen.mix;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = GenManifest {
        n: cfg.gen.n,
        seed: cfg.seed,
        sources: mix.sources.iter().map(|s| (s.name.clone(), 0)).collect(),
        tag_histogram: BTreeMap::new(),
        tag_counts: BTreeMap::new(),
        samples: Vec::with_capacity(cfg.gen.n),
    };
    for i in 0..cfg.gen.n {
        let src = mix.pick_source(&mut rng)?;
        let scene_seed: u64 = rng.random();
        let sample = generate_scene(&mix.sources[src].config, scene_seed)?;
        let dir = io::sample_dir_name(i);
        io::write_sample(&out.join(&dir), &sample)?;
        let tags: Vec<String> = sample.degeneracy_tags.iter().map(|t| t.name().to_string()).collect();
        for t in &tags {
            *m.tag_counts.entry(t.clone()).or_default() += 1;
        }
        *m.tag_histogram.entry(tags.join("+")).or_default() += 1;
        let name = mix.sources[src].name.clone();
        *m.sources.entry(name.clone()).or_default() += 1;
        m.samples.push(SampleEntry { dir, source: name, scene_seed, tags });
    }
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m)?)?;
    cfg.save(out)?;
    Ok(m)
}

fn load_named(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    let list = io::list_samples(dir)?;
    if list.is_empty() {
        return Err(Error::Empty(format!("no samples under {}", dir.display())));
    }
    list.iter()
        .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), io::read_sample(p)?)))
        .collect()
}

/// Pretrains a one-stream model, or finetunes a fusion model when both
/// single-modality checkpoints are configured. Writes checkpoint, optimizer
/// state, log and config into `out`; with `cfg.data`, also the metrics on
/// that dataset.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Trainer> {
    cfg.save(out)?;
    let trainer = match (&cfg.rgb_checkpoint, &cfg.motion_checkpoint) {
        (Some(r), Some(m)) => {
            let (rgb, motion) = (Checkpoint::load(r)?, Checkpoint::load(m)?);
            finetune_fusion(&rgb, &motion, cfg.model.clone(), cfg.train.clone(), Some(out))?
        }
        (None, None) => pretrain_single(cfg.model.clone(), cfg.train.clone(), Some(out))?,
        _ => return Err(Error::InvalidConfig("finetuning needs both rgb_checkpoint and motion_checkpoint".into())),
    };
    if let Some(data) = &cfg.data {
        let samples: Vec<SceneSample> = load_named(data)?.into_iter().map(|(_, s)| s).collect();
        let report = trainer.evaluate(&samples)?;
        std::fs::write(out.join(METRICS_FILE), serde_json::to_vec_pretty(&report)?)?;
        trainer.save(out, Some(&report))?;
    }
    Ok(trainer)
}

struct Loaded {
    model: FusionModel,
    stats: Option<MotionStats>,
    target: TargetKind,
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let ck = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let model = FusionModel::from_checkpoint(&ck, DType::F32)?;
    let stats: Option<MotionStats> = serde_json::from_value(ck.meta["motion_stats"].clone()).unwrap_or(None);
    let saved: Option<TargetKind> = serde_json::from_value(ck.meta["target"].clone()).unwrap_or(None);
    let target = cfg.target.or(saved).unwrap_or(TargetKind::Moving);
    Ok(Loaded { model, stats, target })
}

fn model_frames(cfg: &RunConfig, samples: &[(String, SceneSample)]) -> Result<Vec<Frame>> {
    let l = load_model(cfg)?;
    let plain: Vec<SceneSample> = samples.iter().map(|(_, s)| s.clone()).collect();
    let mut frames = predict_frames(&l.model, &plain, l.target, l.stats.as_ref())?;
    for (f, (name, _)) in frames.iter_mut().zip(samples) {
        f.id = name.clone();
    }
    Ok(frames)
}

fn dump_frames(path: &Path, samples: &[(String, SceneSample)], target: TargetKind) -> Result<Vec<Frame>> {
    let mut dump: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for f in read_dump(path)? {
        let d = f.detections()?;
        dump.insert(f.frame_id, d);
    }
    samples
        .iter()
        .map(|(name, s)| {
            let predictions =
                dump.remove(name).ok_or_else(|| Error::format(path, format!("no predictions for frame {name}")))?;
            Ok(Frame { id: name.clone(), predictions, ground_truth: sample_targets(s, target) })
        })
        .collect()
}

/// Scores a prediction dump (when configured) or a checkpoint on `cfg.data`.
/// With `out`, writes the report and the config there.
pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>) -> Result<MetricReport> {
    let samples = load_named(require(&cfg.data, "data")?)?;
    let frames = match &cfg.predictions {
        Some(p) => dump_frames(p, &samples, cfg.target.unwrap_or(TargetKind::Moving))?,
        None => model_frames(cfg, &samples)?,
    };
    let report = evaluate(&frames)?;
    if let Some(dir) = out {
        cfg.save(dir)?;
        std::fs::write(dir.join(METRICS_FILE), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}

const PALETTE: [[f32; 3]; 6] =
    [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.4, 1.0], [1.0, 1.0, 0.2], [1.0, 0.2, 1.0], [0.2, 1.0, 1.0]];

fn write_overlay(path: &Path, s: &SceneSample, dets: &[Detection]) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut c = [s.frames[0][[y, x, 0]], s.frames[0][[y, x, 1]], s.frames[0][[y, x, 2]]];
            for (i, d) in dets.iter().filter(|d| d.confidence >= 0.5).enumerate() {
                if d.mask[[y, x]] {
                    let p = PALETTE[i % PALETTE.len()];
                    c = [0.5 * c[0] + 0.5 * p[0], 0.5 * c[1] + 0.5 * p[1], 0.5 * c[2] + 0.5 * p[2]];
                }
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes the prediction dump of the checkpoint on `cfg.data`, plus overlay
/// PNGs under `out/overlays` when `cfg.overlays` is set.
pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<Vec<DumpFrame>> {
    let samples = load_named(require(&cfg.data, "data")?)?;
    let frames = model_frames(cfg, &samples)?;
    cfg.save(out)?;
    let dump: Vec<DumpFrame> = frames.iter().map(|f| DumpFrame::new(&f.id, &f.predictions)).collect();
    write_dump(&out.join(PREDICTIONS_FILE), &dump)?;
    if cfg.overlays {
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir)?;
        for (f, (name, s)) in frames.iter().zip(&samples) {
            write_overlay(&dir.join(format!("{name}.png")), s, &f.predictions)?;
        }
    }
    Ok(dump)
}

/// One `bench` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub modality: Modality,
    pub params: usize,
    /// Median forward wall time.
    pub wall_ms: f64,
    /// Peak heap growth during one forward pass, when the counting allocator
    /// is installed.
    pub peak_bytes: Option<usize>,
    /// Parameters plus attention weights (`pairs x heads`) at 4 bytes each.
    pub estimated_bytes: usize,
    pub pairs: PairCounts,
    pub closed_form: PairCounts,
}

impl BenchRow {
    pub fn table_line(&self) -> String {
        let peak = self.peak_bytes.map_or("-".to_string(), |b| format!("{:.2}", b as f64 / 1048576.0));
        format!(
            "{:<7} {:<4} params {:>8} | {:>9.2} ms | peak {:>8} MiB | est {:>8.2} MiB | pairs enc {:>10} cross {:>10} self {:>8} total {:>10}{}",
            self.mechanism.name(),
            self.modality.to_string(),
            self.params,
            self.wall_ms,
            peak,
            self.estimated_bytes as f64 / 1048576.0,
            self.pairs.encoder,
            self.pairs.cross,
            self.pairs.self_attn,
            self.pairs.total(),
            if self.pairs == self.closed_form { "" } else { "  (closed form differs)" }
        )
    }
}

fn random_input(model: &FusionModel, h: usize, w: usize, seed: u64) -> Result<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |c: usize| -> Result<candle_core::Tensor> {
        let v: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        crate::nn::host(v, &[1, c, h, w], DType::F32)
    };
    let streams = model.cfg.streams();
    let mut input = ModelInput::default();
    if streams.contains(&Stream::Appearance) {
        input.rgb = Some(make(3)?);
    }
    if streams.contains(&Stream::Motion) {
        input.motion = Some(make(model.cfg.stream_modality(Stream::Motion).channels())?);
    }
    Ok(input)
}

/// Wall time, memory and attention-pair counts of one forward pass per
/// configured mechanism. With `out`, writes `bench.json` and the config.
pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    if b.repeats == 0 || b.mechanisms.is_empty() {
        return Err(Error::InvalidConfig("bench needs repeats >= 1 and at least one mechanism".into()));
    }
    let mut rows = Vec::with_capacity(b.mechanisms.len());
    for &mechanism in &b.mechanisms {
        let mut mcfg = cfg.model.clone();
        mcfg.mechanism = mechanism;
        if mechanism.is_fused() && mcfg.modality == Modality::Rgb {
            mcfg.modality = Modality::Motion(MotionKind::OpticalFlow);
        }
        let model = FusionModel::new(mcfg.clone(), cfg.seed, DType::F32)?;
        let input = random_input(&model, b.height, b.width, cfg.seed)?;
        let stats = AttnStats::default();
        let baseline = alloc::current();
        alloc::reset_peak();
        model.forward(&input, Some(&stats))?;
        let peak_bytes = alloc::peak_since_reset(baseline);
        let mut times = Vec::with_capacity(b.repeats);
        for _ in 0..b.repeats {
            let t0 = Instant::now();
            model.forward(&input, None)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let pairs = stats.snapshot();
        let params = model.params.n_scalars();
        rows.push(BenchRow {
            mechanism,
            modality: mcfg.modality,
            params,
            wall_ms: times[times.len() / 2],
            peak_bytes,
            estimated_bytes: 4 * (params + mcfg.n_heads * pairs.total() as usize),
            pairs,
            closed_form: expected_pairs(&mcfg, b.height, b.width),
        });
    }
    if let Some(dir) = out {
        cfg.save(dir)?;
        let doc =
            serde_json::json!({ "height": b.height, "width": b.width, "rows": rows, "ordered": pair_ordering(&rows) });
        std::fs::write(dir.join(BENCH_FILE), serde_json::to_vec_pretty(&doc)?)?;
    }
    Ok(rows)
}

/// `single < mbt < d <= ed` on total pairs, when all four were measured.
pub fn pair_ordering(rows: &[BenchRow]) -> Option<bool> {
    let get = |m: Mechanism| rows.iter().find(|r| r.mechanism == m).map(|r| r.pairs.total());
    let (s, mbt, d, ed) = (
        get(Mechanism::Single)?,
        get(Mechanism::MbtDecoder)?,
        get(Mechanism::Decoder)?,
        get(Mechanism::EncoderDecoder)?,
    );
    Some(s < mbt && mbt < d && d <= ed)
}
