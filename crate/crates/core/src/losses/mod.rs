//! Set-prediction loss: bipartite matching of queries to ground-truth masks
//! and the point-sampled mask and classification objective.
//!
//! Class index 0 is "moving object", 1 is "no object". Mask terms are read
//! at sampled points in normalized image coordinates, so predictions at
//! stride 4 and targets at full resolution never need resizing.

mod hungarian;
mod points;

pub use hungarian::hungarian;
pub use points::{bilinear_at, corners, sample_points, uniform_points};

use candle_core::Tensor;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::Prediction;
use crate::nn::{host, sigmoid, to_host};
use crate::{Error, Result};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 5.0, dice: 5.0, cls: 2.0, noobj: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ce, self.dice, self.cls, self.noobj];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { ce: self.ce * c, dice: self.dice * c, cls: self.cls * c, noobj: self.noobj * c }
    }
}

/// Point sampling used by matching and by the mask loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointConfig {
    pub k: usize,
    pub oversample: f64,
    pub importance: f64,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self { k: 12544, oversample: 3.0, importance: 0.75 }
    }
}

impl PointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.oversample < 1.0 || !(0.0..=1.0).contains(&self.importance) {
            return Err(Error::InvalidConfig(format!("bad point config {self:?}")));
        }
        Ok(())
    }
}

/// Query-to-target pairs of one image; queries not listed predict no object.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub n_queries: usize,
}

impl MatchAssignment {
    pub fn unmatched(&self) -> Vec<usize> {
        let mut used = vec![false; self.n_queries];
        for &(q, _) in &self.pairs {
            used[q] = true;
        }
        (0..self.n_queries).filter(|&q| !used[q]).collect()
    }
}

/// Per-term breakdown of a loss, weights already applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    pub noobj: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.ce + self.dice + self.cls + self.noobj
    }
}

pub struct LossOutput {
    pub total: Tensor,
    pub terms: LossTerms,
    /// `assignments[set][batch]`.
    pub assignments: Vec<Vec<MatchAssignment>>,
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` per row of `N x K`.
pub fn dice_loss(probs: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inter = (probs * gt)?.sum(1)?;
    let denom = ((probs.sum(1)? + gt.sum(1)?)? + DICE_EPS)?;
    Ok((1.0 - ((inter * 2.0)? + DICE_EPS)?.div(&denom)?)?)
}

/// Mean binary cross-entropy with logits per row of `N x K`.
pub fn sigmoid_ce(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x g + log(1 + exp(-|x|))
    let soft = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((soft - (logits * gt)?)?.mean(1)?)
}

/// Cross-entropy of `N x C` logits against integer labels, per row.
pub fn class_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(Error::Shape(format!("{} labels for {n} x {c} logits", labels.len())));
    }
    let mut onehot = vec![0f32; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = host(onehot, &[n, c], logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    Ok((logp * onehot)?.sum(1)?.neg()?)
}

fn host64(values: Vec<f64>, dtype: candle_core::DType) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, n, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mask_f32(m: &Array2<bool>) -> Vec<f32> {
    m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Matching cost of every query against every target for one image.
///
/// `mask_logits` is `Nq x h x w` row-major, `class_logits` is `Nq x 2`.
/// All pairs are scored on the same `points`.
pub fn cost_matrix(
    mask_logits: &[f32],
    class_logits: &[f32],
    h: usize,
    w: usize,
    targets: &[Array2<bool>],
    weights: &LossWeights,
    points: &[(f32, f32)],
) -> Result<Vec<Vec<f64>>> {
    let nq = class_logits.len() / 2;
    if mask_logits.len() != nq * h * w {
        return Err(Error::Shape(format!("{} mask values for {nq} queries of {h}x{w}", mask_logits.len())));
    }
    let k = points.len() as f64;
    let gts: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            let (th, tw) = t.dim();
            let m = mask_f32(t);
            points.iter().map(|&(x, y)| bilinear_at(&m, th, tw, x, y) as f64).collect()
        })
        .collect();
    let gt_sums: Vec<f64> = gts.iter().map(|g| g.iter().sum()).collect();
    let mut cost = Vec::with_capacity(nq);
    for q in 0..nq {
        let map = &mask_logits[q * h * w..(q + 1) * h * w];
        let x: Vec<f64> = points.iter().map(|&(px, py)| bilinear_at(map, h, w, px, py) as f64).collect();
        let p: Vec<f64> = x.iter().map(|&v| sigmoid64(v)).collect();
        let sp: f64 = x.iter().map(|&v| softplus(v)).sum();
        let p_sum: f64 = p.iter().sum();
        let (c0, c1) = (class_logits[2 * q] as f64, class_logits[2 * q + 1] as f64);
        let p_moving = 1.0 / (1.0 + (c1 - c0).exp());
        let row = gts
            .iter()
            .zip(&gt_sums)
            .map(|(g, &gs)| {
                let xg: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum();
                let pg: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                let ce = (sp - xg) / k;
                let dice = 1.0 - (2.0 * pg + DICE_EPS) / (p_sum + gs + DICE_EPS);
                -weights.cls * p_moving + weights.ce * ce + weights.dice * dice
            })
            .collect();
        cost.push(row);
    }
    Ok(cost)
}

/// Optimal assignment of the queries of image `b` in `pred` to `targets`.
pub fn hungarian_match(
    pred: &Prediction,
    b: usize,
    targets: &[Array2<bool>],
    weights: &LossWeights,
    points: &[(f32, f32)],
) -> Result<MatchAssignment> {
    let (_, nq, h, w) = pred.mask_logits.dims4()?;
    let masks = to_host(&pred.mask_logits.get(b)?)?;
    let classes = to_host(&pred.class_logits.get(b)?)?;
    let cost = cost_matrix(&masks, &classes, h, w, targets, weights, points)?;
    let pairs = if targets.is_empty() { vec![] } else { hungarian(&cost)? };
    Ok(MatchAssignment { pairs, n_queries: nq })
}

/// Loss summed over every prediction set and averaged over the batch.
///
/// `targets[b]` holds the ground-truth masks of image `b` at any
/// resolution. Each set is matched independently.
pub fn total_loss<R: Rng + ?Sized>(
    sets: &[Prediction],
    targets: &[Vec<Array2<bool>>],
    weights: &LossWeights,
    pc: &PointConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    weights.validate()?;
    pc.validate()?;
    let first = sets.first().ok_or_else(|| Error::Empty("prediction sets".into()))?;
    let (bsz, nq, h, w) = first.mask_logits.dims4()?;
    if targets.len() != bsz {
        return Err(Error::Shape(format!("{} target lists for batch {bsz}", targets.len())));
    }
    let dtype = first.mask_logits.dtype();
    let gt_maps: Vec<Vec<(usize, usize, Vec<f32>)>> =
        targets.iter().map(|ts| ts.iter().map(|t| (t.dim().0, t.dim().1, mask_f32(t))).collect()).collect();

    let mut total: Option<Tensor> = None;
    let mut terms = LossTerms::default();
    let mut assignments = Vec::with_capacity(sets.len());
    for pred in sets {
        if pred.mask_logits.dims4()? != (bsz, nq, h, w) || pred.class_logits.dims3()? != (bsz, nq, 2) {
            return Err(Error::Shape("prediction sets disagree in shape".into()));
        }
        let masks = to_host(&pred.mask_logits)?;
        if masks.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask logits".into()));
        }
        let classes = to_host(&pred.class_logits)?;
        let mut set_assign = Vec::with_capacity(bsz);
        let mut idx = Vec::new();
        let mut wts = Vec::new();
        let mut gt_pts = Vec::new();
        let mut labels = vec![1usize; bsz * nq];
        let mut qw = vec![weights.noobj; bsz * nq];
        for b in 0..bsz {
            let m = &masks[b * nq * h * w..(b + 1) * nq * h * w];
            let c = &classes[b * nq * 2..(b + 1) * nq * 2];
            let pts = uniform_points(pc.k, rng);
            let assign = if targets[b].is_empty() {
                MatchAssignment { pairs: vec![], n_queries: nq }
            } else {
                let cost = cost_matrix(m, c, h, w, &targets[b], weights, &pts)?;
                MatchAssignment { pairs: hungarian(&cost)?, n_queries: nq }
            };
            for &(q, t) in &assign.pairs {
                labels[b * nq + q] = 0;
                qw[b * nq + q] = weights.cls;
                let base = ((b * nq + q) * h * w) as u32;
                let qm = &m[q * h * w..(q + 1) * h * w];
                let (th, tw, gt) = &gt_maps[b][t];
                for (x, y) in sample_points(qm, h, w, pc.k, pc.oversample, pc.importance, rng) {
                    let (ci, cw) = corners(h, w, x, y);
                    idx.extend(ci.iter().map(|i| base + i));
                    wts.extend(cw);
                    gt_pts.push(bilinear_at(gt, *th, *tw, x, y));
                }
            }
            set_assign.push(assign);
        }

        let cls_ce = class_ce(&pred.class_logits.reshape((bsz * nq, 2))?, &labels)?;
        let matched: Vec<f64> = labels.iter().zip(&qw).map(|(&l, &w)| if l == 0 { w } else { 0.0 }).collect();
        let unmatched: Vec<f64> = labels.iter().zip(&qw).map(|(&l, &w)| if l == 0 { 0.0 } else { w }).collect();
        let cls_part = (&cls_ce * host64(matched, dtype)?)?.sum_all()?;
        let noobj_part = (&cls_ce * host64(unmatched, dtype)?)?.sum_all()?;
        terms.cls += crate::nn::scalar(&cls_part)? / bsz as f64;
        terms.noobj += crate::nn::scalar(&noobj_part)? / bsz as f64;
        let mut set_loss = (cls_part + noobj_part)?;

        let n_pairs = gt_pts.len() / pc.k;
        if n_pairs > 0 {
            let flat = pred.mask_logits.flatten_all()?;
            let n = idx.len();
            let idx = Tensor::from_vec(idx, n, flat.device())?;
            let sampled =
                (flat.index_select(&idx, 0)? * host(wts, &[n], dtype)?)?.reshape((n_pairs, pc.k, 4))?.sum(2)?;
            let gt = host(gt_pts, &[n_pairs, pc.k], dtype)?;
            let ce = (sigmoid_ce(&sampled, &gt)?.sum_all()? * weights.ce)?;
            let dice = (dice_loss(&sigmoid(&sampled)?, &gt)?.sum_all()? * weights.dice)?;
            terms.ce += crate::nn::scalar(&ce)? / bsz as f64;
            terms.dice += crate::nn::scalar(&dice)? / bsz as f64;
            set_loss = ((set_loss + ce)? + dice)?;
        }
        total = Some(match total {
            Some(t) => (t + set_loss)?,
            None => set_loss,
        });
        assignments.push(set_assign);
    }
    let total = (total.expect("at least one set") / bsz as f64)?;
    let value = crate::nn::scalar(&total)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    Ok(LossOutput { total, terms, assignments })
}
