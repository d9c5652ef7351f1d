//! Instance-level evaluation: greedy IoU matching, COCO-style AP, the
//! Pu/Ru/Fu and FP/FN-per-frame grid averages, and foreground/background
//! pixel precision.

mod classes;
pub mod rle;

pub use classes::{movable_body, movable_class_filter, COCO_MOVING, COCO_STATIC};
pub use rle::Rle;

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::fusion::{resize_bilinear, Prediction};
use crate::nn::to_host;
use crate::{Error, Result};

/// IoU thresholds of the Pu/Ru/Fu and FP/FN grids.
pub const IOU_GRID: [f64; 7] = [0.01, 0.1, 0.3, 0.5, 0.75, 0.9, 0.95];
/// Confidence thresholds of the grids.
pub const CONF_GRID: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub mask: Array2<bool>,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub id: String,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<Array2<bool>>,
}

pub type DetectionSet = [Frame];

pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Outcome of matching one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// `(prediction, ground truth)` pairs.
    pub tp: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Prediction indices ordered by descending confidence, ties by index.
pub fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy matching: in confidence order each prediction claims the
/// unclaimed ground truth of highest IoU (lowest index on ties) if that IoU
/// reaches `iou_t`.
pub fn match_detections(preds: &[Detection], gts: &[Array2<bool>], iou_t: f64) -> FrameMatch {
    let mut claimed = vec![false; gts.len()];
    let mut out = FrameMatch::default();
    for p in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = iou(&preds[p].mask, gt);
            if v >= iou_t && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                out.tp.push((p, g));
            }
            None => out.fp.push(p),
        }
    }
    out.fn_ = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    out
}

fn above(frame: &Frame, conf_t: f64) -> Vec<Detection> {
    frame.predictions.iter().filter(|d| d.confidence >= conf_t).cloned().collect()
}

/// Average precision at one IoU threshold with 101-point interpolation.
/// `None` when the set has no ground truth.
pub fn average_precision(set: &DetectionSet, iou_t: f64) -> Option<f64> {
    let n_gt: usize = set.iter().map(|f| f.ground_truth.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for f in set {
        let m = match_detections(&f.predictions, &f.ground_truth, iou_t);
        let mut tp = vec![false; f.predictions.len()];
        for &(p, _) in &m.tp {
            tp[p] = true;
        }
        for p in confidence_order(&f.predictions) {
            scored.push((f.predictions[p].confidence, tp[p]));
        }
    }
    // stable: equal scores keep frame order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, t) in &scored {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let i = recall.partition_point(|&x| x < target - 1e-12);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    Some(sum / 101.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

/// AP averaged over IoU 0.50:0.05:0.95, plus AP50 and AP75.
pub fn coco_ap(set: &DetectionSet) -> Result<ApResult> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation frames".into()));
    }
    let per: Vec<Option<f64>> = (0..10).map(|i| average_precision(set, 0.5 + 0.05 * i as f64)).collect();
    let ap = per.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(ApResult { ap, ap50: per[0], ap75: per[5] })
}

/// Raw counts of one grid cell summed over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn cell_counts(set: &DetectionSet, iou_t: f64, conf_t: f64) -> CellCounts {
    let mut c = CellCounts::default();
    for f in set {
        let m = match_detections(&above(f, conf_t), &f.ground_truth, iou_t);
        c.tp += m.tp.len();
        c.fp += m.fp.len();
        c.fn_ += m.fn_.len();
    }
    c
}

fn check_grid(ious: &[f64], confs: &[f64]) -> Result<()> {
    if ious.is_empty() || confs.is_empty() {
        return Err(Error::Empty("threshold grid".into()));
    }
    if ious.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::InvalidConfig(format!("IoU thresholds must lie in (0, 1]: {ious:?}")));
    }
    Ok(())
}

/// Instance precision, recall and F-score averaged over the grid. Cells
/// with no predictions (or no ground truth) count as 0 precision (recall);
/// `Fu` is the harmonic mean of the averaged `Pu` and `Ru`.
pub fn pu_ru_fu(set: &DetectionSet, ious: &[f64], confs: &[f64]) -> Result<(f64, f64, f64)> {
    check_grid(ious, confs)?;
    let (mut p, mut r) = (0.0, 0.0);
    for &it in ious {
        for &ct in confs {
            let c = cell_counts(set, it, ct);
            p += if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
            r += if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
        }
    }
    let n = (ious.len() * confs.len()) as f64;
    let (pu, ru) = (p / n, r / n);
    let fu = if pu + ru > 0.0 { 2.0 * pu * ru / (pu + ru) } else { 0.0 };
    Ok((pu, ru, fu))
}

/// Grid-averaged false positives and false negatives per frame.
pub fn fp_fn(set: &DetectionSet, ious: &[f64], confs: &[f64]) -> Result<(f64, f64)> {
    check_grid(ious, confs)?;
    if set.is_empty() {
        return Err(Error::Empty("evaluation frames".into()));
    }
    let (mut fp, mut fn_) = (0usize, 0usize);
    for &it in ious {
        for &ct in confs {
            let c = cell_counts(set, it, ct);
            fp += c.fp;
            fn_ += c.fn_;
        }
    }
    let n = (ious.len() * confs.len() * set.len()) as f64;
    Ok((fp as f64 / n, fn_ as f64 / n))
}

fn union(masks: impl Iterator<Item = Array2<bool>>, shape: (usize, usize)) -> Array2<bool> {
    let mut u = Array2::from_elem(shape, false);
    for m in masks {
        u.zip_mut_with(&m, |a, &b| *a |= b);
    }
    u
}

/// Background and object pixel precision, averaged over frames and
/// confidence thresholds; frames with an empty denominator are skipped.
/// `None` when every denominator was empty.
pub fn bg_obj_precision(set: &DetectionSet, confs: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
    if set.is_empty() || confs.is_empty() {
        return Err(Error::Empty("frames or confidence grid".into()));
    }
    let (mut bg, mut nbg, mut obj, mut nobj) = (0.0, 0usize, 0.0, 0usize);
    for f in set {
        let shape = match (f.ground_truth.first(), f.predictions.first()) {
            (Some(g), _) => g.dim(),
            (None, Some(p)) => p.mask.dim(),
            (None, None) => continue,
        };
        let gt = union(f.ground_truth.iter().cloned(), shape);
        for &ct in confs {
            let pred = union(above(f, ct).into_iter().map(|d| d.mask), shape);
            let (mut pf, mut pf_hit, mut pb, mut pb_hit) = (0usize, 0usize, 0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt.iter()) {
                if p {
                    pf += 1;
                    pf_hit += g as usize;
                } else {
                    pb += 1;
                    pb_hit += (!g) as usize;
                }
            }
            if pf > 0 {
                obj += pf_hit as f64 / pf as f64;
                nobj += 1;
            }
            if pb > 0 {
                bg += pb_hit as f64 / pb as f64;
                nbg += 1;
            }
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { None } else { Some(s / n as f64) };
    Ok((avg(bg, nbg), avg(obj, nobj)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub bg: Option<f64>,
    pub obj: Option<f64>,
    pub pu: f64,
    pub ru: f64,
    pub fu: f64,
    pub fp_per_frame: f64,
    pub fn_per_frame: f64,
    pub n_frames: usize,
}

/// Every metric with the default grids.
pub fn evaluate(set: &DetectionSet) -> Result<MetricReport> {
    let ap = coco_ap(set)?;
    let (pu, ru, fu) = pu_ru_fu(set, &IOU_GRID, &CONF_GRID)?;
    let (fp_per_frame, fn_per_frame) = fp_fn(set, &IOU_GRID, &CONF_GRID)?;
    let (bg, obj) = bg_obj_precision(set, &CONF_GRID)?;
    Ok(MetricReport {
        ap: ap.ap,
        ap50: ap.ap50,
        ap75: ap.ap75,
        bg,
        obj,
        pu,
        ru,
        fu,
        fp_per_frame,
        fn_per_frame,
        n_frames: set.len(),
    })
}

/// Detections of image `b`: each query's mask logits resized to `h x w` and
/// kept where positive, confidence = moving-object probability. Queries
/// with empty masks are dropped.
pub fn extract_detections(pred: &Prediction, b: usize, h: usize, w: usize) -> Result<Vec<Detection>> {
    let (_, nq, mh, mw) = pred.mask_logits.dims4()?;
    let masks = to_host(&pred.mask_logits.get(b)?)?;
    let cls = to_host(&pred.class_logits.get(b)?)?;
    let mut out = Vec::new();
    for q in 0..nq {
        let up = resize_bilinear(&masks[q * mh * mw..(q + 1) * mh * mw], mh, mw, h, w);
        let mask = Array2::from_shape_vec((h, w), up.iter().map(|&v| v > 0.0).collect()).expect("resized");
        if !mask.iter().any(|&v| v) {
            continue;
        }
        let (c0, c1) = (cls[2 * q] as f64, cls[2 * q + 1] as f64);
        out.push(Detection { mask, confidence: 1.0 / (1.0 + (c1 - c0).exp()) });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpInstance {
    pub rle_mask: Rle,
    pub confidence: f64,
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpFrame {
    pub frame_id: String,
    pub instances: Vec<DumpInstance>,
}

impl DumpFrame {
    pub fn new(frame_id: &str, detections: &[Detection]) -> Self {
        Self {
            frame_id: frame_id.to_string(),
            instances: detections
                .iter()
                .map(|d| DumpInstance { rle_mask: rle::encode(&d.mask), confidence: d.confidence })
                .collect(),
        }
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.instances
            .iter()
            .map(|i| Ok(Detection { mask: rle::decode(&i.rle_mask)?, confidence: i.confidence }))
            .collect()
    }
}

/// Writes one JSON object per line.
pub fn write_dump(path: &Path, frames: &[DumpFrame]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for fr in frames {
        serde_json::to_writer(&mut f, fr)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpFrame>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
