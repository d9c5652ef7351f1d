//! Independent brute-force implementations used as test oracles.
#![allow(dead_code)]

use motionseg::eval::{Detection, Frame};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn iou_px(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (h, w) = a.dim();
    let (mut i, mut u) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if a[[y, x]] && b[[y, x]] {
                i += 1;
            }
            if a[[y, x]] || b[[y, x]] {
                u += 1;
            }
        }
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Minimum assignment cost by enumerating every injective map.
pub fn min_assignment(cost: &[Vec<f64>]) -> f64 {
    let r = cost.len();
    let c = if r == 0 { 0 } else { cost[0].len() };
    if r == 0 || c == 0 {
        return 0.0;
    }
    let small = r.min(c);
    let mut best = f64::INFINITY;
    let mut stack = vec![(0usize, 0u32, 0.0f64)];
    while let Some((i, used, acc)) = stack.pop() {
        if i == small {
            best = best.min(acc);
            continue;
        }
        for j in 0..r.max(c) {
            if used & (1 << j) == 0 {
                let v = if r <= c { cost[i][j] } else { cost[j][i] };
                stack.push((i + 1, used | (1 << j), acc + v));
            }
        }
    }
    best
}

/// Confidence order with ties broken by index.
pub fn order(preds: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap().then(a.cmp(&b)));
    idx
}

/// The unique choice vector consistent with greedy claiming, found by
/// enumerating every (GT or none) choice per prediction. Returns, per
/// prediction index, the claimed ground truth.
pub fn greedy_by_enumeration(preds: &[Detection], gts: &[Array2<bool>], t: f64) -> Vec<Option<usize>> {
    let ord = order(preds);
    let p = preds.len();
    let g = gts.len();
    let ious: Vec<Vec<f64>> = preds.iter().map(|d| gts.iter().map(|m| iou_px(&d.mask, m)).collect()).collect();
    let total = (g + 1).pow(p as u32);
    let mut found = None;
    for code in 0..total {
        let mut c = code;
        let choice: Vec<Option<usize>> = (0..p)
            .map(|_| {
                let v = c % (g + 1);
                c /= g + 1;
                if v == g {
                    None
                } else {
                    Some(v)
                }
            })
            .collect();
        let mut taken = vec![false; g];
        let mut ok = true;
        for &pi in &ord {
            let best = (0..g)
                .filter(|&j| !taken[j])
                .fold(None, |acc: Option<usize>, j| match acc {
                    Some(b) if ious[pi][b] >= ious[pi][j] => Some(b),
                    _ => Some(j),
                })
                .filter(|&j| ious[pi][j] >= t);
            if choice[pi] != best {
                ok = false;
                break;
            }
            if let Some(j) = best {
                taken[j] = true;
            }
        }
        if ok {
            assert!(found.is_none(), "greedy outcome must be unique");
            found = Some(choice);
        }
    }
    found.expect("a consistent outcome exists")
}

pub fn counts(frames: &[Frame], t: f64, conf: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for f in frames {
        let kept: Vec<Detection> = f.predictions.iter().filter(|d| d.confidence >= conf).cloned().collect();
        let ch = greedy_by_enumeration(&kept, &f.ground_truth, t);
        let m = ch.iter().filter(|c| c.is_some()).count();
        tp += m;
        fp += kept.len() - m;
        fn_ += f.ground_truth.len() - m;
    }
    (tp, fp, fn_)
}

/// AP from the textbook definition: at each recall level r, the best
/// precision among ranks reaching recall >= r.
pub fn ap(frames: &[Frame], t: f64) -> Option<f64> {
    let n_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked = Vec::new();
    for f in frames {
        let ch = greedy_by_enumeration(&f.predictions, &f.ground_truth, t);
        for i in order(&f.predictions) {
            ranked.push((f.predictions[i].confidence, ch[i].is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut pr = Vec::new();
    let mut tp = 0;
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        pr.push((tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64));
    }
    let mut s = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        s += pr.iter().filter(|p| p.1 >= level - 1e-12).map(|p| p.0).fold(0.0, f64::max);
    }
    Some(s / 101.0)
}

pub struct Report {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub pu: f64,
    pub ru: f64,
    pub fu: f64,
    pub fp: f64,
    pub fn_: f64,
    pub bg: Option<f64>,
    pub obj: Option<f64>,
}

pub fn report(frames: &[Frame], ious: &[f64], confs: &[f64]) -> Report {
    let aps: Vec<Option<f64>> = (0..10).map(|i| ap(frames, 0.5 + 0.05 * i as f64)).collect();
    let apm = if aps[0].is_none() { None } else { Some(aps.iter().map(|a| a.unwrap()).sum::<f64>() / 10.0) };
    let (mut p, mut r, mut fps, mut fns) = (0.0, 0.0, 0, 0);
    for &t in ious {
        for &c in confs {
            let (tp, fp, fn_) = counts(frames, t, c);
            p += if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            r += if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            fps += fp;
            fns += fn_;
        }
    }
    let cells = (ious.len() * confs.len()) as f64;
    let (pu, ru) = (p / cells, r / cells);
    let fu = if pu + ru > 0.0 { 2.0 * pu * ru / (pu + ru) } else { 0.0 };
    let nf = cells * frames.len() as f64;
    let (mut bg, mut nbg, mut obj, mut nobj) = (0.0, 0, 0.0, 0);
    for f in frames {
        let dims = f.ground_truth.first().map(|g| g.dim()).or(f.predictions.first().map(|p| p.mask.dim()));
        let Some((h, w)) = dims else { continue };
        for &c in confs {
            let (mut fg_n, mut fg_ok, mut bg_n, mut bg_ok) = (0, 0, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    let pf = f.predictions.iter().any(|d| d.confidence >= c && d.mask[[y, x]]);
                    let gf = f.ground_truth.iter().any(|g| g[[y, x]]);
                    if pf {
                        fg_n += 1;
                        fg_ok += gf as usize;
                    } else {
                        bg_n += 1;
                        bg_ok += (!gf) as usize;
                    }
                }
            }
            if fg_n > 0 {
                obj += fg_ok as f64 / fg_n as f64;
                nobj += 1;
            }
            if bg_n > 0 {
                bg += bg_ok as f64 / bg_n as f64;
                nbg += 1;
            }
        }
    }
    Report {
        ap: apm,
        ap50: aps[0],
        ap75: aps[5],
        pu,
        ru,
        fu,
        fp: fps as f64 / nf,
        fn_: fns as f64 / nf,
        bg: if nbg > 0 { Some(bg / nbg as f64) } else { None },
        obj: if nobj > 0 { Some(obj / nobj as f64) } else { None },
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<bool> {
    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
    let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
    Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
}

/// Frames with at most four predictions and four ground-truth masks.
pub fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<Frame> {
    let confs = [0.2, 0.3, 0.45, 0.5, 0.6, 0.7, 0.8, 0.95];
    (0..n)
        .map(|i| {
            let gts: Vec<Array2<bool>> = (0..rng.random_range(0..=4)).map(|_| random_mask(rng, 6, 6)).collect();
            let preds = (0..rng.random_range(0..=4))
                .map(|_| {
                    // half of the predictions are jittered copies of a ground truth
                    let mask = if !gts.is_empty() && rng.random_bool(0.5) {
                        let mut m = gts[rng.random_range(0..gts.len())].clone();
                        let (y, x) = (rng.random_range(0..6), rng.random_range(0..6));
                        m[[y, x]] = !m[[y, x]];
                        m
                    } else {
                        random_mask(rng, 6, 6)
                    };
                    Detection { mask, confidence: confs[rng.random_range(0..confs.len())] }
                })
                .collect();
            Frame { id: format!("{i}"), predictions: preds, ground_truth: gts }
        })
        .collect()
}
