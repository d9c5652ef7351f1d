mod common;

use candle_core::{Tensor, Var};
use common::*;
use motionseg::fusion::Prediction;
use motionseg::losses::{
    class_ce, cost_matrix, dice_loss, hungarian, sample_points, sigmoid_ce, total_loss, LossWeights, PointConfig,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Minimum total cost over all injective assignments of the smaller side.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let (n, m) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
        if row == n {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..m {
            if used[j] {
                continue;
            }
            used[j] = true;
            let v = if transpose { cost[j][row] } else { cost[row][j] };
            best = best.min(v + rec(cost, row + 1, used, transpose));
            used[j] = false;
        }
        best
    }
    if r <= c {
        rec(cost, 0, &mut vec![false; c], false)
    } else {
        rec(cost, 0, &mut vec![false; r], true)
    }
}

fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}

fn check_injective(pairs: &[(usize, usize)], r: usize, c: usize) {
    assert_eq!(pairs.len(), r.min(c));
    let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    rows.sort_unstable();
    cols.sort_unstable();
    rows.dedup();
    cols.dedup();
    assert_eq!(rows.len(), pairs.len());
    assert_eq!(cols.len(), pairs.len());
}

#[test]
fn two_by_two_matching_example() {
    let cost = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
    let pairs = hungarian(&cost).unwrap();
    assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(assignment_cost(&cost, &pairs), 1.0);
}

#[test]
fn five_by_five_matches_permutation_enumeration() {
    let mut r = rng(1);
    for _ in 0..100 {
        let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let pairs = hungarian(&cost).unwrap();
        check_injective(&pairs, 5, 5);
        assert!((assignment_cost(&cost, &pairs) - brute_force(&cost)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn matching_is_optimal_and_injective(rows in 1usize..8, cols in 0usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let pairs = hungarian(&cost).unwrap();
        if cols == 0 {
            prop_assert!(pairs.is_empty());
        } else {
            check_injective(&pairs, rows, cols);
            prop_assert!((assignment_cost(&cost, &pairs) - brute_force(&cost)).abs() < 1e-9);
        }
    }
}

#[test]
fn non_finite_costs_rejected() {
    assert!(hungarian(&[vec![1.0, f64::INFINITY]]).is_err());
}

#[test]
fn uniform_points_are_centred() {
    let logits = vec![0f32; 16];
    let pts = sample_points(&logits, 4, 4, 100_000, 3.0, 0.0, &mut rng(2));
    assert_eq!(pts.len(), 100_000);
    let mx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / 1e5;
    let my = pts.iter().map(|p| p.1 as f64).sum::<f64>() / 1e5;
    assert!((mx - 0.5).abs() < 0.02 && (my - 0.5).abs() < 0.02);
    assert!(pts.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
}

#[test]
fn constant_logits_still_give_k_points() {
    let logits = vec![3f32; 64];
    for k in [1, 7, 100] {
        assert_eq!(sample_points(&logits, 8, 8, k, 3.0, 0.75, &mut rng(3)).len(), k);
    }
}

#[test]
fn importance_points_concentrate_on_the_boundary() {
    let (h, w) = (128, 128);
    // vertical half-plane boundary at x = 0.5, logits ramp to +-10
    let logits: Vec<f32> = (0..h * w)
        .map(|i| {
            let u = ((i % w) as f32 + 0.5) / w as f32;
            ((u - 0.5) * 33.0).clamp(-10.0, 10.0)
        })
        .collect();
    let k = 100;
    let band = 2.0 / (k as f32).sqrt();
    for seed in 0..5 {
        let pts = sample_points(&logits, h, w, k, 3.0, 1.0, &mut rng(seed));
        let near = pts.iter().filter(|p| (p.0 - 0.5).abs() <= band).count();
        assert!(near as f64 >= 0.95 * k as f64, "{near} of {k}");
    }
}

#[test]
fn dice_examples() {
    let k = 10;
    let ones = t64(&vec![1.0; k], &[1, k]);
    let zeros = t64(&vec![0.0; k], &[1, k]);
    assert!(host64(&dice_loss(&ones, &ones).unwrap())[0].abs() < 1e-15);
    let disjoint = host64(&dice_loss(&zeros, &ones).unwrap())[0];
    assert!((disjoint - (1.0 - 1.0 / (k as f64 + 1.0))).abs() < 1e-15);
    let d = host64(&dice_loss(&t64(&[0.8, 0.2], &[1, 2]), &t64(&[1.0, 0.0], &[1, 2])).unwrap())[0];
    assert!((d - (1.0 - 2.6 / 3.0)).abs() < 1e-12);
}

#[test]
fn pointwise_loss_gradients_match_finite_differences() {
    let mut r = rng(4);
    for trial in 0..5u64 {
        let (n, k) = (2 + trial as usize % 3, 4 + trial as usize);
        let x = randn(&mut r, n * k, 3.0);
        let gt = t64(&(0..n * k).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect::<Vec<_>>(), &[n, k]);
        let e = fd_rel_error(&x, &[n, k], |z| project(&sigmoid_ce(z, &gt).unwrap(), trial));
        assert!(e < 1e-4, "ce {e}");
        let e = fd_rel_error(&x, &[n, k], |z| {
            project(&dice_loss(&motionseg::nn::sigmoid(z).unwrap(), &gt).unwrap(), trial)
        });
        assert!(e < 1e-4, "dice {e}");
        let labels: Vec<usize> = (0..n * k / 2).map(|_| r.random_range(0..2)).collect();
        let e = fd_rel_error(&x[..n * k / 2 * 2], &[n * k / 2, 2], |z| project(&class_ce(z, &labels).unwrap(), trial));
        assert!(e < 1e-4, "class {e}");
    }
}

fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| f(y, x))
}

fn prediction(masks: Vec<f64>, classes: Vec<f64>, b: usize, nq: usize, h: usize, w: usize) -> Prediction {
    Prediction { mask_logits: t64(&masks, &[b, nq, h, w]), class_logits: t64(&classes, &[b, nq, 2]) }
}

fn ce2(c0: f64, c1: f64, label: usize) -> f64 {
    let m = c0.max(c1);
    let lse = m + ((c0 - m).exp() + (c1 - m).exp()).ln();
    lse - if label == 0 { c0 } else { c1 }
}

#[test]
fn empty_target_loss_is_weighted_no_object_ce() {
    let (nq, h, w) = (4, 6, 6);
    let classes = randn(&mut rng(5), nq * 2, 2.0);
    let pred = prediction(randn(&mut rng(6), nq * h * w, 2.0), classes.clone(), 1, nq, h, w);
    let lw = LossWeights::default();
    let out = total_loss(&[pred], &[vec![]], &lw, &PointConfig { k: 64, ..Default::default() }, &mut rng(7)).unwrap();
    let expect: f64 = (0..nq).map(|q| lw.noobj * ce2(classes[2 * q], classes[2 * q + 1], 1)).sum();
    assert!((host64(&out.total)[0] - expect).abs() < 1e-12);
    assert!(out.assignments[0][0].pairs.is_empty());
    assert_eq!(out.assignments[0][0].unmatched(), vec![0, 1, 2, 3]);
}

fn two_object_scene() -> (Vec<Array2<bool>>, Vec<f64>, Vec<f64>) {
    let (h, w) = (8, 8);
    let gts = vec![mask(32, 32, |y, x| y < 16 && x < 16), mask(32, 32, |_, x| x >= 20)];
    // query 2 predicts object 0, query 0 predicts object 1, query 1 is empty
    let mut m = vec![0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            m[2 * h * w + y * w + x] = if y < 4 && x < 4 { 40.0 } else { -40.0 };
            m[y * w + x] = if x >= 5 { 40.0 } else { -40.0 };
            m[h * w + y * w + x] = -40.0;
        }
    }
    let c = vec![40.0, -40.0, -40.0, 40.0, 40.0, -40.0];
    (gts, m, c)
}

#[test]
fn matching_pairs_queries_with_their_objects() {
    let (gts, m, c) = two_object_scene();
    let pred = prediction(m, c, 1, 3, 8, 8);
    let pc = PointConfig { k: 256, oversample: 3.0, importance: 0.0 };
    let out = total_loss(&[pred.clone(), pred], &[gts], &LossWeights::default(), &pc, &mut rng(8)).unwrap();
    for set in &out.assignments {
        let mut pairs = set[0].pairs.clone();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (2, 0)]);
    }
    assert!(out.terms.cls < 1e-12 && out.terms.noobj < 1e-12);
}

#[test]
fn perfect_saturated_predictions_have_zero_loss() {
    // one object covering the frame: no boundary for interpolation to soften
    let gts = vec![mask(16, 16, |_, _| true)];
    let mut m = vec![60.0; 16];
    m.extend(vec![-60.0; 16]);
    let pred = prediction(m, vec![60.0, -60.0, -60.0, 60.0], 1, 2, 4, 4);
    let pc = PointConfig { k: 200, ..Default::default() };
    let out = total_loss(&[pred.clone(), pred], &[gts], &LossWeights::default(), &pc, &mut rng(9)).unwrap();
    assert_eq!(out.assignments[1][0].pairs, vec![(0, 0)]);
    // f32 interpolation weights leave round-off of order 1e-7
    assert!(host64(&out.total)[0] < 1e-5, "{:?}", out.terms);
}

#[test]
fn scaling_weights_scales_loss_and_keeps_matching() {
    let (gts, m, c) = two_object_scene();
    let noise = randn(&mut rng(10), m.len(), 10.0);
    let m: Vec<f64> = m.iter().zip(&noise).map(|(a, b)| a * 0.1 + b).collect();
    let pred = prediction(m, c.iter().map(|v| v * 0.05).collect(), 1, 3, 8, 8);
    let pc = PointConfig { k: 128, ..Default::default() };
    let lw = LossWeights::default();
    let base = total_loss(std::slice::from_ref(&pred), std::slice::from_ref(&gts), &lw, &pc, &mut rng(11)).unwrap();
    for c in [0.5, 3.0] {
        let s = total_loss(std::slice::from_ref(&pred), std::slice::from_ref(&gts), &lw.scaled(c), &pc, &mut rng(11))
            .unwrap();
        assert_eq!(s.assignments, base.assignments);
        let (a, b) = (host64(&s.total)[0], host64(&base.total)[0]);
        assert!((a - c * b).abs() < 1e-9 * a.abs().max(1.0));
    }
    let points = motionseg::losses::uniform_points(64, &mut rng(12));
    let mh: Vec<f32> = host64(&pred.mask_logits).iter().map(|&v| v as f32).collect();
    let ch: Vec<f32> = host64(&pred.class_logits).iter().map(|&v| v as f32).collect();
    let c1 = cost_matrix(&mh, &ch, 8, 8, &gts, &lw, &points).unwrap();
    let c3 = cost_matrix(&mh, &ch, 8, 8, &gts, &lw.scaled(3.0), &points).unwrap();
    assert_eq!(hungarian(&c1).unwrap(), hungarian(&c3).unwrap());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (gts, m, c) = two_object_scene();
    let mut r = rng(13);
    for trial in 0..5u64 {
        let mv: Vec<f64> = m.iter().map(|v| v * 0.02 + r.random_range(-1.0..1.0)).collect();
        let cls = t64(&c.iter().map(|v| v * 0.01).collect::<Vec<_>>(), &[1, 3, 2]);
        let pc = PointConfig { k: 32, oversample: 3.0, importance: 0.0 };
        let f = |z: &Tensor| {
            let p = Prediction { mask_logits: z.clone(), class_logits: cls.clone() };
            total_loss(&[p], std::slice::from_ref(&gts), &LossWeights::default(), &pc, &mut rng(trial)).unwrap().total
        };
        let e = fd_rel_error(&mv, &[1, 3, 8, 8], f);
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn loss_decreases_under_gradient_descent() {
    let (gts, _, _) = two_object_scene();
    let masks = Var::from_tensor(&t64(&randn(&mut rng(14), 3 * 64, 1.0), &[1, 3, 8, 8])).unwrap();
    let classes = Var::from_tensor(&t64(&randn(&mut rng(15), 6, 1.0), &[1, 3, 2])).unwrap();
    let pc = PointConfig { k: 128, oversample: 3.0, importance: 0.0 };
    let mut prev = f64::INFINITY;
    for step in 0..60 {
        let p = Prediction { mask_logits: masks.as_tensor().clone(), class_logits: classes.as_tensor().clone() };
        let out = total_loss(&[p], std::slice::from_ref(&gts), &LossWeights::default(), &pc, &mut rng(99)).unwrap();
        let v = host64(&out.total)[0];
        assert!(v >= 0.0);
        assert!(v < prev, "step {step}: {v} !< {prev}");
        prev = v;
        let g = out.total.backward().unwrap();
        for var in [&masks, &classes] {
            let upd = (var.as_tensor() - (g.get(var.as_tensor()).unwrap() * 0.05).unwrap()).unwrap();
            var.set(&upd).unwrap();
        }
    }
}
