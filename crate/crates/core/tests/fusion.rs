mod common;

use candle_core::{DType, Tensor};
use common::*;
use motionseg::fusion::{
    attention_mask, decode, deformable_attention, encode, expected_pairs, level_shapes, masked_cross_attention, mca,
    msa, AttentionMask, AttnStats, Checkpoint, DeformInput, DeformableAttention, EncoderLayer, FusionConfig,
    FusionModel, LevelShape, Mechanism, Modality, ModelInput, MultiHeadAttention, OutputFusion, Prediction,
    StreamMemory, TransformerLayer,
};
use motionseg::motionrep::MotionKind;
use motionseg::nn::ParamStore;
use rand::Rng;

fn set(ps: &ParamStore, t: &Tensor, values: &[f64]) {
    let name = ps.iter().find(|(_, v)| v.as_tensor().id() == t.id()).map(|(n, _)| n.clone()).unwrap();
    let f: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    ps.set(&name, &f).unwrap();
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

fn eye_attention(ps: &mut ParamStore, d: usize, heads: usize) -> MultiHeadAttention {
    let a = MultiHeadAttention::new(ps, "a", d, heads).unwrap();
    for l in [&a.q, &a.k, &a.v, &a.o] {
        set(ps, &l.weight, &identity(d));
        set(ps, &l.bias, &vec![0.0; d]);
    }
    a
}

fn apply_linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let d_in = x.len();
    (0..d_out).map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>()).collect()
}

/// Explicit-loop multi-head attention for one batch element.
fn loop_attention(
    a: &MultiHeadAttention,
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    allow: Option<&[Vec<bool>]>,
) -> Vec<Vec<f64>> {
    let (wq, bq) = (host64(&a.q.weight), host64(&a.q.bias));
    let (wk, bk) = (host64(&a.k.weight), host64(&a.k.bias));
    let (wv, bv) = (host64(&a.v.weight), host64(&a.v.bias));
    let (wo, bo) = (host64(&a.o.weight), host64(&a.o.bias));
    let d = bq.len();
    let dh = d / a.n_heads;
    let q: Vec<Vec<f64>> = xq.iter().map(|x| apply_linear(&wq, &bq, x)).collect();
    let k: Vec<Vec<f64>> = xkv.iter().map(|x| apply_linear(&wk, &bk, x)).collect();
    let v: Vec<Vec<f64>> = xkv.iter().map(|x| apply_linear(&wv, &bv, x)).collect();
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let mut merged = vec![0.0; d];
        for h in 0..a.n_heads {
            let r = h * dh..(h + 1) * dh;
            let mut logits = Vec::new();
            for (j, kj) in k.iter().enumerate() {
                if allow.is_some_and(|m| !m[i][j]) {
                    continue;
                }
                let s: f64 = r.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt();
                logits.push((j, s));
            }
            let m = logits.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|p| (p.1 - m).exp()).sum();
            for &(j, s) in &logits {
                let w = (s - m).exp() / z;
                for c in r.clone() {
                    merged[c] += w * v[j][c];
                }
            }
        }
        out.push(apply_linear(&wo, &bo, &merged));
    }
    out
}

fn rows(v: &[f64], n: usize) -> Vec<Vec<f64>> {
    v.chunks(n).map(|c| c.to_vec()).collect()
}

#[test]
fn single_token_self_attention_is_value_then_output_projection() {
    let mut ps = ParamStore::new(1, DType::F64);
    let a = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
    let x = vec![0.3, -1.0, 0.5, 2.0];
    let out = host64(&msa(&a, &t64(&x, &[1, 4])).unwrap());
    let v = apply_linear(&host64(&a.v.weight), &host64(&a.v.bias), &x);
    let expect = apply_linear(&host64(&a.o.weight), &host64(&a.o.bias), &v);
    assert!(max_abs_diff(&out, &expect) < 1e-12);
}

#[test]
fn two_token_identity_attention_matches_scalar_softmax() {
    let mut ps = ParamStore::new(1, DType::F64);
    let a = eye_attention(&mut ps, 2, 1);
    let out = host64(&msa(&a, &t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap());
    let e = (1.0f64 / 2f64.sqrt()).exp();
    let w = e / (e + 1.0);
    assert!(max_abs_diff(&out, &[w, 1.0 - w, 1.0 - w, w]) < 1e-6);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(2);
    let mut ps = ParamStore::new(2, DType::F32);
    let a = MultiHeadAttention::new(&mut ps, "a", 8, 2).unwrap();
    let x = Tensor::from_vec(
        randn(&mut r, 2 * 7 * 8, 3.0).iter().map(|&v| v as f32).collect(),
        (2, 7, 8),
        &candle_core::Device::Cpu,
    )
    .unwrap();
    let w = a.weights(&a.q.forward(&x).unwrap(), &a.k.forward(&x).unwrap(), None).unwrap();
    let s = host64(&w.sum(3).unwrap());
    assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn cross_attention_reductions() {
    let mut r = rng(3);
    let mut ps = ParamStore::new(3, DType::F64);
    let a = MultiHeadAttention::new(&mut ps, "a", 6, 3).unwrap();
    let x = t64(&randn(&mut r, 5 * 6, 1.0), &[5, 6]);
    assert_eq!(host64(&mca(&a, &x, &x).unwrap()), host64(&msa(&a, &x).unwrap()));

    let y = randn(&mut r, 6, 1.0);
    let out = host64(&mca(&a, &x, &t64(&y, &[1, 6])).unwrap());
    let expect = apply_linear(
        &host64(&a.o.weight),
        &host64(&a.o.bias),
        &apply_linear(&host64(&a.v.weight), &host64(&a.v.bias), &y),
    );
    for row in rows(&out, 6) {
        assert!(max_abs_diff(&row, &expect) < 1e-12);
    }
}

#[test]
fn cross_attention_matches_loop_oracle() {
    let mut r = rng(4);
    for trial in 0..5 {
        let mut ps = ParamStore::new(trial, DType::F64);
        let a = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
        let x = randn(&mut r, 2 * 4, 0.5);
        let y = randn(&mut r, 3 * 4, 0.5);
        let out = host64(&mca(&a, &t64(&x, &[2, 4]), &t64(&y, &[3, 4])).unwrap());
        let oracle: Vec<f64> = loop_attention(&a, &rows(&x, 4), &rows(&y, 4), None).concat();
        assert!(max_abs_diff(&out, &oracle) < 1e-12);
    }
}

#[test]
fn masked_attention_cases() {
    let mut r = rng(5);
    let mut ps = ParamStore::new(5, DType::F64);
    let a = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
    let x = t64(&randn(&mut r, 3 * 4, 1.0), &[3, 4]);
    let yv = randn(&mut r, 5 * 4, 1.0);
    let y = t64(&yv, &[5, 4]);

    let full = AttentionMask::full(1, 3, 5);
    assert_eq!(host64(&masked_cross_attention(&a, &x, &y, &full).unwrap()), host64(&mca(&a, &x, &y).unwrap()));

    // one allowed token per query
    let pick = [4usize, 0, 2];
    let allow: Vec<bool> = (0..15).map(|i| pick[i / 5] == i % 5).collect();
    let m = AttentionMask::new(1, 3, 5, allow).unwrap();
    let out = rows(&host64(&masked_cross_attention(&a, &x, &y, &m).unwrap()), 4);
    for (i, &j) in pick.iter().enumerate() {
        let v = apply_linear(&host64(&a.v.weight), &host64(&a.v.bias), &yv[j * 4..j * 4 + 4]);
        let o = apply_linear(&host64(&a.o.weight), &host64(&a.o.bias), &v);
        assert!(max_abs_diff(&out[i], &o) < 1e-12);
    }

    for _ in 0..20 {
        let mut allow: Vec<bool> = (0..15).map(|_| r.random_bool(0.5)).collect();
        allow[5..10].fill(false);
        let m = AttentionMask::new(1, 3, 5, allow).unwrap();
        let grid: Vec<Vec<bool>> = m.allow.chunks(5).map(|c| c.to_vec()).collect();
        assert!(grid[1].iter().all(|&v| v));
        let out = host64(&masked_cross_attention(&a, &x, &y, &m).unwrap());
        let xr = rows(&host64(&x), 4);
        let oracle = loop_attention(&a, &xr, &rows(&yv, 4), Some(&grid)).concat();
        assert!(max_abs_diff(&out, &oracle) < 1e-12);
    }

    let wrong = AttentionMask::full(1, 2, 5);
    assert!(masked_cross_attention(&a, &x, &y, &wrong).is_err());
}

#[test]
fn non_finite_input_rejected() {
    let mut ps = ParamStore::new(0, DType::F64);
    let a = MultiHeadAttention::new(&mut ps, "a", 2, 1).unwrap();
    assert!(msa(&a, &t64(&[f64::NAN, 0.0], &[1, 2])).is_err());
    assert!(MultiHeadAttention::new(&mut ps, "b", 5, 2).is_err());
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut r = rng(6);
    let mut ps = ParamStore::new(6, DType::F64);
    let a = MultiHeadAttention::new(&mut ps, "a", 8, 4).unwrap();
    let x = randn(&mut r, 6 * 8, 1.0);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let xp: Vec<f64> = perm.iter().flat_map(|&p| x[p * 8..p * 8 + 8].to_vec()).collect();
    let out = rows(&host64(&msa(&a, &t64(&x, &[6, 8])).unwrap()), 8);
    let outp = rows(&host64(&msa(&a, &t64(&xp, &[6, 8])).unwrap()), 8);
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_abs_diff(&outp[i], &out[p]) < 1e-6);
    }
}

#[test]
fn transformer_layer_identity_and_shape() {
    let mut ps = ParamStore::new(7, DType::F64);
    let layer = TransformerLayer::new(&mut ps, "t", 4, 2, 8).unwrap();
    let x = t64(&randn(&mut rng(7), 3 * 4, 1.0), &[3, 4]);
    assert_eq!(layer.forward(&x).unwrap().dims(), &[3, 4]);
    let x5 = t64(&randn(&mut rng(8), 5 * 4, 1.0), &[1, 5, 4]);
    assert_eq!(layer.forward(&x5).unwrap().dims(), &[1, 5, 4]);
    for t in [&layer.attn.o.weight, &layer.attn.o.bias, &layer.mlp.fc2.weight, &layer.mlp.fc2.bias] {
        set(&ps, t, &vec![0.0; t.elem_count()]);
    }
    assert_eq!(host64(&layer.forward(&x).unwrap()), host64(&x));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng(9);
    for trial in 0..5u64 {
        let t = 4 + (trial as usize % 5);
        let mut ps = ParamStore::new(trial, DType::F64);
        let a = MultiHeadAttention::new(&mut ps, "a", 4, 2).unwrap();
        let layer = TransformerLayer::new(&mut ps, "t", 4, 2, 8).unwrap();
        let x = randn(&mut r, t * 4, 1.0);
        let y = t64(&randn(&mut r, 5 * 4, 1.0), &[5, 4]);
        let e = fd_rel_error(&x, &[t, 4], |z| project(&msa(&a, z).unwrap(), trial));
        assert!(e < 1e-4, "msa {e}");
        let e = fd_rel_error(&x, &[t, 4], |z| project(&mca(&a, z, &y).unwrap(), trial));
        assert!(e < 1e-4, "mca {e}");
        let yv = host64(&y);
        let xt = t64(&x, &[t, 4]);
        let e = fd_rel_error(&yv, &[5, 4], |c| project(&mca(&a, &xt, c).unwrap(), trial));
        assert!(e < 1e-4, "mca context {e}");
        let e = fd_rel_error(&x, &[t, 4], |z| project(&layer.forward(z).unwrap(), trial));
        assert!(e < 1e-4, "transformer layer {e}");
        let allow: Vec<bool> = (0..t * 5).map(|_| r.random_bool(0.6)).collect();
        let m = AttentionMask::new(1, t, 5, allow).unwrap();
        let e = fd_rel_error(&x, &[t, 4], |z| project(&masked_cross_attention(&a, z, &y, &m).unwrap(), trial));
        assert!(e < 1e-4, "masked {e}");
    }
}

fn bilinear(map: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let mut acc = 0.0;
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let (xx, yy) = (x0 + dx, y0 + dy);
        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
            continue;
        }
        let wgt = (1.0 - (x - xx).abs()) * (1.0 - (y - yy).abs());
        acc += wgt * map[yy as usize * w + xx as usize];
    }
    acc
}

#[test]
fn degenerate_deformable_sampling_is_level_mean() {
    let d = 4;
    let shapes = [LevelShape { h: 4, w: 6 }, LevelShape { h: 2, w: 3 }, LevelShape { h: 1, w: 2 }];
    let t: usize = shapes.iter().map(|s| s.len()).sum();
    let mut ps = ParamStore::new(1, DType::F64);
    let da = DeformableAttention::new(&mut ps, "da", d, 2, 3, 4).unwrap();
    set(&ps, &da.offsets.bias, &vec![0.0; da.offsets.bias.elem_count()]);
    for l in [&da.value, &da.out] {
        set(&ps, &l.weight, &identity(d));
        set(&ps, &l.bias, &vec![0.0; d]);
    }
    let vals = randn(&mut rng(10), t * d, 1.0);
    let q = t64(&randn(&mut rng(11), t * d, 1.0), &[1, t, d]);
    let v = t64(&vals, &[1, t, d]);
    let stats = AttnStats::default();
    let out = host64(
        &deformable_attention(&[DeformInput { attn: &da, query: q, value: v }], &shapes, Some(&stats)).unwrap()[0],
    );
    let starts = [0, 24, 30];
    for (lq, sq) in shapes.iter().enumerate() {
        for y in 0..sq.h {
            for x in 0..sq.w {
                let tok = starts[lq] + y * sq.w + x;
                let (u, vv) = ((x as f64 + 0.5) / sq.w as f64, (y as f64 + 0.5) / sq.h as f64);
                for c in 0..d {
                    let mut mean = 0.0;
                    for (l, s) in shapes.iter().enumerate() {
                        let plane: Vec<f64> = (0..s.len()).map(|i| vals[(starts[l] + i) * d + c]).collect();
                        mean += bilinear(&plane, s.h, s.w, u * s.w as f64 - 0.5, vv * s.h as f64 - 0.5) / 3.0;
                    }
                    assert!(
                        (out[tok * d + c] - mean).abs() < 1e-6,
                        "token {tok} channel {c}: {} vs {mean}",
                        out[tok * d + c]
                    );
                }
            }
        }
    }
    // linear in the number of pixels: L * K samples per query pixel
    assert_eq!(stats.snapshot().encoder, (t * 3 * 4) as u64);
}

#[test]
fn joint_encoder_halves_are_symmetric() {
    let d = 8;
    let shapes = vec![LevelShape { h: 4, w: 4 }, LevelShape { h: 2, w: 2 }, LevelShape { h: 1, w: 1 }];
    let t: usize = shapes.iter().map(|s| s.len()).sum();
    let mut ps = ParamStore::new(2, DType::F64);
    let la: Vec<EncoderLayer> =
        (0..2).map(|i| EncoderLayer::new(&mut ps, &format!("a.{i}"), d, 16, 2, 3, 3).unwrap()).collect();
    let lb: Vec<EncoderLayer> =
        (0..2).map(|i| EncoderLayer::new(&mut ps, &format!("b.{i}"), d, 16, 2, 3, 3).unwrap()).collect();
    ps.copy_prefix("a.", "b.").unwrap();
    // learned offsets that reach across the seam
    for l in &la {
        set(&ps, &l.attn.offsets.weight, &randn(&mut rng(3), l.attn.offsets.weight.elem_count(), 0.5));
    }
    ps.copy_prefix("a.", "b.").unwrap();
    let x = t64(&randn(&mut rng(12), t * d, 1.0), &[1, t, d]);
    let pos = t64(&randn(&mut rng(13), t * d, 0.2), &[1, t, d]);
    let out = encode(
        &[la.as_slice(), lb.as_slice()],
        vec![x.clone(), x.clone()],
        &[pos.clone(), pos.clone()],
        &shapes,
        true,
        None,
    )
    .unwrap();
    assert_eq!(host64(&out[0]), host64(&out[1]));
    let sep = encode(&[la.as_slice()], vec![x.clone()], std::slice::from_ref(&pos), &shapes, false, None).unwrap();
    assert_ne!(host64(&sep[0]), host64(&out[0]));
}

fn desk_cfg(mechanism: Mechanism, modality: Modality) -> FusionConfig {
    FusionConfig {
        mechanism,
        modality,
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 3,
        n_queries: 6,
        n_bottleneck: 2,
        n_points: 2,
        in_proj_dim: 8,
        backbone_widths: [8, 8, 16, 16],
        ..FusionConfig::default()
    }
}

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let v: Vec<f32> = randn(&mut rng(seed), c * h * w, 1.0).iter().map(|&x| x as f32).collect();
    Tensor::from_vec(v, (1, c, h, w), &candle_core::Device::Cpu).unwrap()
}

#[test]
fn single_mechanism_equals_plain_one_stream_pipeline() {
    let model = FusionModel::new(desk_cfg(Mechanism::Single, Modality::Rgb), 3, DType::F32).unwrap();
    let x = image(1, 3, 64, 48);
    let out = model.forward(&ModelInput { rgb: Some(x.clone()), motion: None }, None).unwrap();
    let net = &model.streams[0];
    let f = net.features(&x).unwrap();
    let enc =
        encode(&[net.encoder.as_slice()], vec![f.tokens.clone()], std::slice::from_ref(&f.pos), &f.shapes, false, None)
            .unwrap();
    let mem = net.memory(&enc[0], &f.pos, &f.shapes, &f.stride4).unwrap();
    let plain = decode(&[&net.decoder], &[mem], Mechanism::Single, None, None).unwrap();
    assert_eq!(out.predictions.len(), plain[0].len());
    for (a, b) in out.predictions.iter().zip(&plain[0]) {
        assert_eq!(host64(&a.mask_logits), host64(&b.mask_logits));
        assert_eq!(host64(&a.class_logits), host64(&b.class_logits));
    }
}

fn memory_of(model: &FusionModel, x: &Tensor) -> StreamMemory {
    let net = &model.streams[0];
    let f = net.features(x).unwrap();
    let enc =
        encode(&[net.encoder.as_slice()], vec![f.tokens.clone()], std::slice::from_ref(&f.pos), &f.shapes, false, None)
            .unwrap();
    net.memory(&enc[0], &f.pos, &f.shapes, &f.stride4).unwrap()
}

#[test]
fn decoder_fusion_with_duplicated_stream_reduces_to_single() {
    let model = FusionModel::new(desk_cfg(Mechanism::Single, Modality::Rgb), 4, DType::F64).unwrap();
    let mem = memory_of(&model, &image(2, 3, 48, 48).to_dtype(DType::F64).unwrap());
    let dec = &model.streams[0].decoder;
    let single = decode(&[dec], std::slice::from_ref(&mem), Mechanism::Single, None, None).unwrap();
    let fused = decode(&[dec, dec], &[mem.clone(), mem], Mechanism::Decoder, None, None).unwrap();
    for s in 0..2 {
        for (a, b) in fused[s].iter().zip(&single[0]) {
            assert!(max_abs_diff(&host64(&a.mask_logits), &host64(&b.mask_logits)) < 1e-9);
            assert!(max_abs_diff(&host64(&a.class_logits), &host64(&b.class_logits)) < 1e-9);
        }
    }
}

#[test]
fn decode_rejects_inconsistent_streams() {
    let model = FusionModel::new(desk_cfg(Mechanism::Single, Modality::Rgb), 4, DType::F32).unwrap();
    let mem = memory_of(&model, &image(2, 3, 48, 48));
    let dec = &model.streams[0].decoder;
    assert!(decode(&[dec], std::slice::from_ref(&mem), Mechanism::Decoder, None, None).is_err());
    assert!(decode(&[dec, dec], &[mem.clone(), mem.clone()], Mechanism::Single, None, None).is_err());
    assert!(decode(&[dec, dec], &[mem.clone(), mem], Mechanism::MbtDecoder, None, None).is_err());
}

#[test]
fn attention_masks_come_from_previous_predictions() {
    let logits = vec![5.0f32, -5.0, -5.0, 5.0, -1.0, -1.0, -1.0, -1.0];
    let p = Prediction {
        mask_logits: Tensor::from_vec(logits, (1, 2, 2, 2), &candle_core::Device::Cpu).unwrap(),
        class_logits: Tensor::zeros((1, 2, 2), DType::F32, &candle_core::Device::Cpu).unwrap(),
    };
    let m = attention_mask(&p, LevelShape { h: 2, w: 2 }).unwrap();
    // first query keeps its diagonal, second (all background) falls back to full
    assert_eq!(m.allow, vec![true, false, false, true, true, true, true, true]);
}

#[test]
fn output_fusion_head() {
    let mut ps = ParamStore::new(1, DType::F64);
    let head = OutputFusion::new(&mut ps, "h").unwrap();
    let mk = |seed: u64| Prediction {
        mask_logits: t64(&randn(&mut rng(seed), 3 * 4 * 5, 2.0), &[1, 3, 4, 5]),
        class_logits: t64(&randn(&mut rng(seed + 100), 3 * 2, 2.0), &[1, 3, 2]),
    };
    let (a, b) = (mk(1), mk(2));
    // averaging start: identical streams give that stream back
    let same = head.fuse(&a, &a).unwrap();
    assert!(max_abs_diff(&host64(&same.mask_logits), &host64(&a.mask_logits)) < 1e-12);
    assert!(max_abs_diff(&host64(&same.class_logits), &host64(&a.class_logits)) < 1e-12);
    // projection onto the appearance stream
    set(&ps, &head.mask_weight, &[1.0, 0.0]);
    set(&ps, &head.class.weight, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let p = head.fuse(&a, &b).unwrap();
    assert_eq!(host64(&p.mask_logits), host64(&a.mask_logits));
    assert_eq!(host64(&p.class_logits), host64(&a.class_logits));
    // generic weights: both inputs move the output, gradients agree with FD
    set(&ps, &head.mask_weight, &[0.7, -0.4]);
    set(&ps, &head.class.weight, &randn(&mut rng(5), 8, 1.0));
    let bm = host64(&b.mask_logits);
    let am = host64(&a.mask_logits);
    for (x0, other, first) in [(&am, &b, true), (&bm, &a, false)] {
        let f = |m: &Tensor| {
            let p = Prediction { mask_logits: m.clone(), class_logits: other.class_logits.clone() };
            let out = if first { head.fuse(&p, other).unwrap() } else { head.fuse(other, &p).unwrap() };
            project(&out.mask_logits, 9)
        };
        assert!(fd_rel_error(x0, &[1, 3, 4, 5], f) < 1e-4);
    }
    for (x0, first) in [(host64(&a.class_logits), true), (host64(&b.class_logits), false)] {
        let f = |c: &Tensor| {
            let pa = Prediction {
                mask_logits: a.mask_logits.clone(),
                class_logits: if first { c.clone() } else { a.class_logits.clone() },
            };
            let pb = Prediction {
                mask_logits: b.mask_logits.clone(),
                class_logits: if first { b.class_logits.clone() } else { c.clone() },
            };
            project(&head.fuse(&pa, &pb).unwrap().class_logits, 10)
        };
        assert!(fd_rel_error(&x0, &[1, 3, 2], f) < 1e-4);
        let base = host64(&f(&t64(&x0, &[1, 3, 2])));
        let mut bumped = x0.clone();
        bumped[0] += 1e-3;
        assert!((host64(&f(&t64(&bumped, &[1, 3, 2])))[0] - base[0]).abs() > 0.0);
    }
    let short = Prediction {
        mask_logits: a.mask_logits.narrow(1, 0, 2).unwrap(),
        class_logits: a.class_logits.narrow(1, 0, 2).unwrap(),
    };
    assert!(head.fuse(&short, &b).is_err());
}

#[test]
fn counted_pairs_match_closed_form_for_every_mechanism() {
    let (h, w) = (64, 48);
    for mech in Mechanism::ALL {
        let modality =
            if mech == Mechanism::Single { Modality::Rgb } else { Modality::Motion(MotionKind::OpticalFlow) };
        let cfg = desk_cfg(mech, modality);
        let model = FusionModel::new(cfg.clone(), 1, DType::F32).unwrap();
        let input = ModelInput {
            rgb: Some(image(1, 3, h, w)),
            motion: if mech == Mechanism::Single { None } else { Some(image(2, 2, h, w)) },
        };
        let stats = AttnStats::default();
        model.forward(&input, Some(&stats)).unwrap();
        assert_eq!(stats.snapshot(), expected_pairs(&cfg, h, w), "{mech}");
    }
}

#[test]
fn bottleneck_is_cheaper_than_naive_concatenation() {
    let (nq, nb, t) = (100u64, 8u64, 1024u64);
    let naive = (2 * nq) * (2 * t);
    let mbt = nq * (t + nb) * 2 + nb * 2 * t;
    assert!(mbt < naive);
    assert_eq!((naive, mbt), (409_600, 222_784));
}

#[test]
fn shape_contract_determinism_and_stride() {
    let cfg = desk_cfg(Mechanism::Decoder, Modality::Motion(MotionKind::SceneFlow));
    let model = FusionModel::new(cfg.clone(), 9, DType::F32).unwrap();
    let input = ModelInput { rgb: Some(image(1, 3, 64, 64)), motion: Some(image(2, 6, 64, 64)) };
    let a = model.forward(&input, None).unwrap();
    let b = model.forward(&input, None).unwrap();
    assert_eq!(a.predictions.len(), cfg.n_dec_layers + 1);
    for (p, q) in a.predictions.iter().zip(&b.predictions) {
        assert_eq!(p.mask_logits.dims(), &[1, cfg.n_queries, 16, 16]);
        assert_eq!(p.class_logits.dims(), &[1, cfg.n_queries, 2]);
        assert_eq!(host64(&p.mask_logits), host64(&q.mask_logits));
        assert!(host64(&p.mask_logits).iter().all(|v| v.is_finite()));
    }
    let big = ModelInput { rgb: Some(image(1, 3, 128, 128)), motion: Some(image(2, 6, 128, 128)) };
    let c = model.forward(&big, None).unwrap();
    assert_eq!(c.predictions[0].mask_logits.dims(), &[1, cfg.n_queries, 32, 32]);
    let wrong = ModelInput { rgb: Some(image(1, 3, 64, 64)), motion: Some(image(2, 2, 64, 64)) };
    assert!(model.forward(&wrong, None).is_err());
    let missing = ModelInput { rgb: Some(image(1, 3, 64, 64)), motion: None };
    assert!(model.forward(&missing, None).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let cfg = desk_cfg(Mechanism::MbtDecoder, Modality::Motion(MotionKind::OpticalFlow));
    let model = FusionModel::new(cfg, 11, DType::F32).unwrap();
    let input = ModelInput { rgb: Some(image(1, 3, 48, 48)), motion: Some(image(2, 2, 48, 48)) };
    let ck = model.to_checkpoint(serde_json::json!({"note": "x"})).unwrap();
    let back =
        FusionModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), DType::F32).unwrap();
    let a = model.forward(&input, None).unwrap();
    let b = back.forward(&input, None).unwrap();
    assert_eq!(host64(&a.predictions[3].mask_logits), host64(&b.predictions[3].mask_logits));
}

#[test]
fn default_configuration_shape_contract() {
    let cfg = FusionConfig::default();
    let model = FusionModel::new(cfg, 0, DType::F32).unwrap();
    let out = model.forward(&ModelInput { rgb: Some(image(3, 3, 96, 96)), motion: None }, None).unwrap();
    assert_eq!(out.predictions.len(), 10);
    assert_eq!(out.predictions[9].mask_logits.dims(), &[1, 100, 24, 24]);
    assert_eq!(
        level_shapes(96, 96),
        vec![LevelShape { h: 12, w: 12 }, LevelShape { h: 6, w: 6 }, LevelShape { h: 3, w: 3 }]
    );
}
