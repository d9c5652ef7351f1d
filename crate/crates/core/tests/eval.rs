mod common;

use common::oracle;
use common::rng;
use motionseg::eval::{
    bg_obj_precision, coco_ap, evaluate, fp_fn, match_detections, movable_body, movable_class_filter, pu_ru_fu,
    read_dump, rle, write_dump, Detection, DumpFrame, Frame, COCO_MOVING, COCO_STATIC, CONF_GRID, IOU_GRID,
};
use ndarray::Array2;
use proptest::prelude::*;

fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
}

fn det(mask: Array2<bool>, confidence: f64) -> Detection {
    Detection { mask, confidence }
}

fn perfect(n: usize) -> Vec<Frame> {
    let mut r = rng(1);
    (0..n)
        .map(|i| {
            let gts: Vec<Array2<bool>> = (0..3).map(|k| rect(8, 8, 0, 2 + k, 2 * k, 2 * k + 2)).collect();
            let preds = gts.iter().map(|g| det(g.clone(), 1.0 - 0.1 * rand::Rng::random::<f64>(&mut r))).collect();
            Frame { id: i.to_string(), predictions: preds, ground_truth: gts }
        })
        .collect()
}

#[test]
fn exact_predictions_are_all_true_positives() {
    for f in perfect(3) {
        for t in [0.01, 0.5, 1.0] {
            let m = match_detections(&f.predictions, &f.ground_truth, t);
            assert_eq!(m.tp.len(), 3);
            assert!(m.fp.is_empty() && m.fn_.is_empty());
        }
    }
}

#[test]
fn one_prediction_two_disjoint_targets() {
    let gts = vec![rect(6, 6, 0, 2, 0, 2), rect(6, 6, 4, 6, 4, 6)];
    let m = match_detections(&[det(gts[1].clone(), 0.9)], &gts, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (vec![(0, 1)], vec![], vec![0]));
}

#[test]
fn greedy_matching_equals_enumeration() {
    let mut r = rng(2);
    for _ in 0..200 {
        let gts: Vec<Array2<bool>> = (0..3).map(|_| oracle::random_mask(&mut r, 5, 5)).collect();
        let preds: Vec<Detection> =
            (0..3).map(|i| det(oracle::random_mask(&mut r, 5, 5), [0.9, 0.5, 0.5][i])).collect();
        for t in [0.1, 0.3, 0.5] {
            let m = match_detections(&preds, &gts, t);
            let expect = oracle::greedy_by_enumeration(&preds, &gts, t);
            let mut got = vec![None; 3];
            for &(p, g) in &m.tp {
                got[p] = Some(g);
            }
            assert_eq!(got, expect);
            assert_eq!(m.fp.len() + m.tp.len(), 3);
        }
    }
}

#[test]
fn ap_examples() {
    let ap = coco_ap(&perfect(4)).unwrap();
    assert_eq!((ap.ap, ap.ap50, ap.ap75), (Some(1.0), Some(1.0), Some(1.0)));

    let gts = vec![rect(6, 6, 0, 3, 0, 3)];
    let none = [Frame { id: "0".into(), predictions: vec![], ground_truth: gts.clone() }];
    assert_eq!(coco_ap(&none).unwrap().ap, Some(0.0));

    let spurious = [Frame {
        id: "0".into(),
        predictions: vec![det(gts[0].clone(), 0.9), det(rect(6, 6, 4, 6, 4, 6), 0.8)],
        ground_truth: gts,
    }];
    assert_eq!(coco_ap(&spurious).unwrap().ap50, Some(1.0));

    let no_gt = [Frame { id: "0".into(), predictions: vec![det(rect(6, 6, 0, 1, 0, 1), 0.9)], ground_truth: vec![] }];
    assert_eq!(coco_ap(&no_gt).unwrap().ap, None);
    assert!(coco_ap(&[]).is_err());
}

#[test]
fn grid_examples() {
    assert_eq!(IOU_GRID.len() * CONF_GRID.len(), 21);
    let set = perfect(2);
    assert_eq!(pu_ru_fu(&set, &IOU_GRID, &CONF_GRID).unwrap(), (1.0, 1.0, 1.0));
    assert_eq!(fp_fn(&set, &IOU_GRID, &CONF_GRID).unwrap(), (0.0, 0.0));
    assert_eq!(bg_obj_precision(&set, &CONF_GRID).unwrap(), (Some(1.0), Some(1.0)));

    let g = rect(6, 6, 1, 4, 1, 4);
    let half = [Frame { id: "0".into(), predictions: vec![det(g.clone(), 0.5)], ground_truth: vec![g] }];
    let (pu, ru, fu) = pu_ru_fu(&half, &IOU_GRID, &CONF_GRID).unwrap();
    assert!((ru - 2.0 / 3.0).abs() < 1e-12);
    assert!((pu - 2.0 / 3.0).abs() < 1e-12 && (fu - 2.0 / 3.0).abs() < 1e-12);

    let empty: Vec<Frame> = (0..4)
        .map(|i| Frame {
            id: i.to_string(),
            predictions: vec![],
            ground_truth: if i < 2 { vec![rect(4, 4, 0, 2, 0, 2)] } else { vec![] },
        })
        .collect();
    assert_eq!(fp_fn(&empty, &IOU_GRID, &CONF_GRID).unwrap(), (0.0, 0.5));
}

#[test]
fn object_precision_is_a_pixel_ratio() {
    let gt = rect(10, 10, 0, 3, 0, 10);
    let whole = rect(10, 10, 0, 10, 0, 10);
    let f = [Frame { id: "0".into(), predictions: vec![det(whole, 0.9)], ground_truth: vec![gt] }];
    let (bg, obj) = bg_obj_precision(&f, &[0.5]).unwrap();
    assert!((obj.unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(bg, None);

    let checker = Array2::from_shape_fn((8, 8), |(y, x)| (x + y) % 2 == 0);
    let left = rect(8, 8, 0, 8, 0, 4);
    let f = [Frame { id: "0".into(), predictions: vec![det(checker, 0.9)], ground_truth: vec![left] }];
    let o = oracle::report(&f, &IOU_GRID, &CONF_GRID);
    let (bg, obj) = bg_obj_precision(&f, &CONF_GRID).unwrap();
    assert_eq!((bg, obj), (o.bg, o.obj));
    assert_eq!(obj, Some(0.5));
}

#[test]
fn metrics_equal_brute_force_oracles() {
    let mut r = rng(3);
    for _ in 0..200 {
        let n = rand::Rng::random_range(&mut r, 1..4);
        let frames = oracle::random_frames(&mut r, n);
        let rep = evaluate(&frames).unwrap();
        let o = oracle::report(&frames, &IOU_GRID, &CONF_GRID);
        assert_eq!((rep.ap, rep.ap50, rep.ap75), (o.ap, o.ap50, o.ap75));
        assert_eq!((rep.pu, rep.ru, rep.fu), (o.pu, o.ru, o.fu));
        assert_eq!((rep.fp_per_frame, rep.fn_per_frame), (o.fp, o.fn_));
        assert_eq!((rep.bg, rep.obj), (o.bg, o.obj));
        for v in [rep.pu, rep.ru, rep.fu].into_iter().chain(rep.ap).chain(rep.bg).chain(rep.obj) {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn spurious_and_deleted_predictions_move_counts_one_way(seed in any::<u64>()) {
        let mut r = rng(seed);
        let frames = oracle::random_frames(&mut r, 2);
        let (fp0, fn0) = fp_fn(&frames, &IOU_GRID, &CONF_GRID).unwrap();
        let mut more = frames.clone();
        // one pixel outside every ground truth: IoU 0, so it can never claim a match
        let free = (0..36).map(|i| (i / 6, i % 6)).find(|&p| more[0].ground_truth.iter().all(|g| !g[p]));
        if let Some((y, x)) = free {
            more[0].predictions.push(det(rect(6, 6, y, y + 1, x, x + 1), 0.99));
            let (fp1, fn1) = fp_fn(&more, &IOU_GRID, &CONF_GRID).unwrap();
            prop_assert!(fp1 > fp0);
            prop_assert_eq!(fn1, fn0);
        }
        let mut fewer = frames.clone();
        if let Some(f) = fewer.iter_mut().find(|f| !f.predictions.is_empty()) {
            f.predictions.pop();
        }
        let (_, fn2) = fp_fn(&fewer, &IOU_GRID, &CONF_GRID).unwrap();
        prop_assert!(fn2 >= fn0);
    }
}

#[test]
fn moving_class_lists() {
    assert!(movable_class_filter("car").unwrap());
    assert!(movable_class_filter("person").unwrap());
    assert!(!movable_class_filter("bench").unwrap());
    assert!(!movable_class_filter("refrigerator").unwrap());
    assert!(movable_class_filter("unicorn").is_err());
    assert_eq!(COCO_MOVING.len() + COCO_STATIC.len(), 80);
    let flags = [(1u16, true), (2, false)].into_iter().collect();
    assert!(!movable_body(&flags, 2).unwrap());
    assert!(movable_body(&flags, 3).is_err());
}

#[test]
fn rle_round_trip_and_dump_file() {
    let m = Array2::from_shape_fn((3, 4), |(y, x)| (y * 4 + x) % 3 == 1);
    let e = rle::encode(&m);
    assert_eq!(e.counts[0], 1);
    assert_eq!(rle::decode(&e).unwrap(), m);
    let ones = Array2::from_elem((2, 2), true);
    assert_eq!(rle::encode(&ones).counts, vec![0, 4]);

    let dir = tempfile::tempdir().unwrap();
    let frames = vec![DumpFrame::new("a", &[det(m.clone(), 0.75)]), DumpFrame::new("b", &[])];
    let p = dir.path().join("pred.jsonl");
    write_dump(&p, &frames).unwrap();
    let back = read_dump(&p).unwrap();
    assert_eq!(back, frames);
    assert_eq!(back[0].detections().unwrap()[0].mask, m);
    assert!(read_dump(&dir.path().join("missing.jsonl")).is_err());
}
