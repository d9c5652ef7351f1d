use candle_core::{DType, Tensor};

use super::attention::AttnStats;
use crate::nn::{host, softmax_last, to_host, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::{Error, Result};

/// Spatial size of one feature level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
}

impl LevelShape {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First token index of every level in the flattened token sequence.
pub fn level_starts(shapes: &[LevelShape]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shapes.len());
    let mut acc = 0;
    for l in shapes {
        s.push(acc);
        acc += l.len();
    }
    s
}

pub fn total_tokens(shapes: &[LevelShape]) -> usize {
    shapes.iter().map(LevelShape::len).sum()
}

/// Fixed 2D sine encoding `T x d` of every token, levels in order.
pub fn sine_positions(shapes: &[LevelShape], d: usize) -> Vec<f32> {
    let half = d / 2;
    let mut out = Vec::with_capacity(total_tokens(shapes) * d);
    let tau = std::f64::consts::TAU;
    for l in shapes {
        for y in 0..l.h {
            for x in 0..l.w {
                let ye = (y as f64 + 0.5) / l.h as f64 * tau;
                let xe = (x as f64 + 0.5) / l.w as f64 * tau;
                for (e, n) in [(ye, half), (xe, d - half)] {
                    for i in 0..n {
                        let freq = 10000f64.powf(2.0 * (i / 2) as f64 / n as f64);
                        let a = e / freq;
                        out.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
                    }
                }
            }
        }
    }
    out
}

/// Multi-scale deformable attention: every query token samples `n_points`
/// learned locations per level around its reference point and mixes them
/// with softmax weights over all `n_levels * n_points` samples of a head.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_points: usize,
}

impl DeformableAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        n_levels: usize,
        n_points: usize,
    ) -> Result<Self> {
        let n_off = n_heads * n_levels * n_points * 2;
        let offsets = Linear {
            weight: ps.param(&format!("{name}.offsets.weight"), &[n_off, d], Init::Zeros)?,
            bias: ps.param(&format!("{name}.offsets.bias"), &[n_off], Init::Zeros)?,
        };
        // Initial sampling pattern: head h looks along direction 2*pi*h/H,
        // point k at distance k + 1 pixels, on every level.
        let mut grid = Vec::with_capacity(n_off);
        for h in 0..n_heads {
            let a = std::f64::consts::TAU * h as f64 / n_heads as f64;
            let (s, c) = a.sin_cos();
            let m = s.abs().max(c.abs());
            for _ in 0..n_levels {
                for k in 0..n_points {
                    grid.push((c / m * (k + 1) as f64) as f32);
                    grid.push((s / m * (k + 1) as f64) as f32);
                }
            }
        }
        ps.set(&format!("{name}.offsets.bias"), &grid)?;
        let n_w = n_heads * n_levels * n_points;
        Ok(Self {
            offsets,
            weights: Linear::zeros(ps, &format!("{name}.weights"), d, n_w)?,
            value: Linear::new(ps, &format!("{name}.value"), d, d)?,
            out: Linear::new(ps, &format!("{name}.out"), d, d)?,
            n_heads,
            n_levels,
            n_points,
        })
    }
}

/// One stream taking part in a deformable attention call.
pub struct DeformInput<'a> {
    pub attn: &'a DeformableAttention,
    /// Query tokens `B x T x d` (features plus positions).
    pub query: Tensor,
    /// Value tokens `B x T x d`.
    pub value: Tensor,
}

/// Deformable attention over one stream, or jointly over several streams
/// whose maps are laid side by side along x (level `l` of the joint map is
/// `S * w_l` wide, horizontally periodic). Each stream projects its own
/// queries and values with its own parameters; reference points live in
/// the stream's own half.
pub fn deformable_attention(
    inputs: &[DeformInput],
    shapes: &[LevelShape],
    stats: Option<&AttnStats>,
) -> Result<Vec<Tensor>> {
    let n_streams = inputs.len();
    if n_streams == 0 {
        return Ok(vec![]);
    }
    let a0 = inputs[0].attn;
    let (heads, n_lv, n_pt) = (a0.n_heads, a0.n_levels, a0.n_points);
    if shapes.len() != n_lv {
        return Err(Error::Shape(format!("{} levels given, attention built for {n_lv}", shapes.len())));
    }
    let (b, t, d) = inputs[0].query.dims3()?;
    if t != total_tokens(shapes) {
        return Err(Error::Shape(format!("{t} tokens for levels totalling {}", total_tokens(shapes))));
    }
    for inp in inputs {
        if inp.query.dims3()? != (b, t, d) || inp.value.dims3()? != (b, t, d) {
            return Err(Error::Shape("streams disagree on token shapes".into()));
        }
    }
    let dh = d / heads;
    let dtype = inputs[0].query.dtype();
    let starts = level_starts(shapes);
    let wrap = n_streams > 1;

    // Values of all streams, rows ordered (batch, head, stream, token).
    let vals: Vec<Tensor> = inputs
        .iter()
        .map(|i| Ok(i.attn.value.forward(&i.value)?.reshape((b, t, heads, dh))?.transpose(1, 2)?))
        .collect::<Result<_>>()?;
    let v_all = Tensor::stack(&vals, 2)?.reshape((b * heads * n_streams * t, dh))?;

    // Reference points of every token, in pixel units of every level.
    let mut base_x = vec![0f32; t * n_lv];
    let mut base_y = vec![0f32; t * n_lv];
    for (lq, sq) in shapes.iter().enumerate() {
        for y in 0..sq.h {
            for x in 0..sq.w {
                let tok = starts[lq] + y * sq.w + x;
                let (u, v) = ((x as f64 + 0.5) / sq.w as f64, (y as f64 + 0.5) / sq.h as f64);
                for (l, s) in shapes.iter().enumerate() {
                    base_x[tok * n_lv + l] = (u * s.w as f64 - 0.5) as f32;
                    base_y[tok * n_lv + l] = (v * s.h as f64 - 0.5) as f32;
                }
            }
        }
    }
    let base_x = host(base_x, &[1, t, 1, n_lv, 1], dtype)?;
    let base_y = host(base_y, &[1, t, 1, n_lv, 1], dtype)?;

    let mut outputs = Vec::with_capacity(n_streams);
    for (si, inp) in inputs.iter().enumerate() {
        let attn = inp.attn;
        let off = attn.offsets.forward(&inp.query)?.reshape((b, t, heads, n_lv, n_pt, 2))?;
        let px = off.narrow(5, 0, 1)?.squeeze(5)?.broadcast_add(&base_x)?;
        let py = off.narrow(5, 1, 1)?.squeeze(5)?.broadcast_add(&base_y)?;
        let aw = softmax_last(&attn.weights.forward(&inp.query)?.reshape((b, t, heads, n_lv * n_pt))?)?
            .reshape((b, t, heads, n_lv, n_pt))?;

        let hx = to_host(&px)?;
        let hy = to_host(&py)?;
        let n = hx.len();
        let mut fx0 = vec![0f32; n];
        let mut fy0 = vec![0f32; n];
        let mut idx = vec![0u32; n * 4];
        let mut valid = vec![0f32; n * 4];
        for (e, (&xf, &yf)) in hx.iter().zip(&hy).enumerate() {
            // e enumerates (batch, token, head, level, point)
            let l = (e / n_pt) % n_lv;
            let head = (e / (n_pt * n_lv)) % heads;
            let bi = e / (n_pt * n_lv * heads * t);
            let s = shapes[l];
            let xj = xf as f64 + (si * s.w) as f64;
            let (x0, y0) = (xj.floor(), (yf as f64).floor());
            fx0[e] = x0 as f32 - (si * s.w) as f32;
            fy0[e] = y0 as f32;
            let joint_w = (n_streams * s.w) as i64;
            for c in 0..4 {
                let xx = x0 as i64 + (c & 1) as i64;
                let yy = y0 as i64 + (c >> 1) as i64;
                if yy < 0 || yy >= s.h as i64 {
                    continue;
                }
                let xx = if wrap {
                    xx.rem_euclid(joint_w)
                } else if xx < 0 || xx >= joint_w {
                    continue;
                } else {
                    xx
                };
                let (src, xl) = ((xx as usize) / s.w, (xx as usize) % s.w);
                let row = ((bi * heads + head) * n_streams + src) * t + starts[l] + yy as usize * s.w + xl;
                idx[e * 4 + c] = row as u32;
                valid[e * 4 + c] = 1.0;
            }
        }
        let shape5 = [b, t, heads, n_lv, n_pt];
        let fx = (px - host(fx0, &shape5, dtype)?)?;
        let fy = (py - host(fy0, &shape5, dtype)?)?;
        let gx = (1.0 - &fx)?;
        let gy = (1.0 - &fy)?;
        let corners = Tensor::stack(&[(&gx * &gy)?, (&fx * &gy)?, (&gx * &fy)?, (&fx * &fy)?], 5)?;
        let w = corners
            .broadcast_mul(&aw.unsqueeze(5)?)?
            .mul(&host(valid, &[b, t, heads, n_lv, n_pt, 4], dtype)?)?
            .reshape((b, t, heads, n_lv * n_pt * 4, 1))?;
        let idx = Tensor::from_vec(idx, n * 4, v_all.device())?;
        let gathered = v_all.index_select(&idx, 0)?.reshape((b, t, heads, n_lv * n_pt * 4, dh))?;
        let sampled = gathered.broadcast_mul(&w)?.sum(3)?.reshape((b, t, d))?;
        outputs.push(attn.out.forward(&sampled)?);
        if let Some(st) = stats {
            st.add_encoder(b * t * n_lv * n_pt);
        }
    }
    Ok(outputs)
}

/// Pre-normalized deformable encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: DeformableAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        d_ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: DeformableAttention::new(ps, &format!("{name}.attn"), d, heads, levels, points)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, d_ffn, d)?,
        })
    }
}

/// Runs `layers[s]` for every stream `s`, jointly when `joint` is set and
/// there are several streams. `pos[s]` is added to the queries only.
pub fn encode(
    layers: &[&[EncoderLayer]],
    tokens: Vec<Tensor>,
    pos: &[Tensor],
    shapes: &[LevelShape],
    joint: bool,
    stats: Option<&AttnStats>,
) -> Result<Vec<Tensor>> {
    let n_layers = layers.first().map_or(0, |l| l.len());
    if layers.iter().any(|l| l.len() != n_layers) || layers.len() != tokens.len() || pos.len() != tokens.len() {
        return Err(Error::Shape("encoder streams disagree".into()));
    }
    let mut xs = tokens;
    for li in 0..n_layers {
        let normed: Vec<Tensor> = xs.iter().zip(layers).map(|(x, l)| l[li].ln1.forward(x)).collect::<Result<_>>()?;
        let inputs: Vec<DeformInput> = normed
            .iter()
            .zip(layers)
            .zip(pos)
            .map(|((n, l), p)| Ok(DeformInput { attn: &l[li].attn, query: n.broadcast_add(p)?, value: n.clone() }))
            .collect::<Result<_>>()?;
        let updates = if joint {
            deformable_attention(&inputs, shapes, stats)?
        } else {
            let mut u = Vec::new();
            for inp in inputs {
                u.extend(deformable_attention(std::slice::from_ref(&inp), shapes, stats)?);
            }
            u
        };
        xs = xs
            .iter()
            .zip(updates)
            .zip(layers)
            .map(|((x, u), l)| {
                let y = (x + u)?;
                Ok((l[li].mlp.forward(&l[li].ln2.forward(&y)?)? + y)?)
            })
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}

/// Flattens `B x d x h x w` maps into `B x T x d` tokens, levels in order.
pub fn flatten_levels(maps: &[Tensor]) -> Result<(Tensor, Vec<LevelShape>)> {
    let mut toks = Vec::with_capacity(maps.len());
    let mut shapes = Vec::with_capacity(maps.len());
    for m in maps {
        let (b, d, h, w) = m.dims4()?;
        toks.push(m.reshape((b, d, h * w))?.transpose(1, 2)?);
        shapes.push(LevelShape { h, w });
    }
    Ok((Tensor::cat(&toks, 1)?, shapes))
}

/// Inverse of [`flatten_levels`].
pub fn split_levels(tokens: &Tensor, shapes: &[LevelShape]) -> Result<Vec<Tensor>> {
    let (b, _, d) = tokens.dims3()?;
    let starts = level_starts(shapes);
    shapes
        .iter()
        .zip(starts)
        .map(|(s, st)| Ok(tokens.narrow(1, st, s.len())?.transpose(1, 2)?.reshape((b, d, s.h, s.w))?))
        .collect()
}

pub fn positions_tensor(shapes: &[LevelShape], d: usize, dtype: DType) -> Result<Tensor> {
    host(sine_positions(shapes, d), &[1, total_tokens(shapes), d], dtype)
}
