use candle_core::Tensor;

use super::attention::{AttentionMask, AttnStats, MultiHeadAttention};
use super::config::{Mechanism, N_LEVELS};
use super::encoder::LevelShape;
use crate::nn::{to_host, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::{Error, Result};

/// Per-query mask logits `B x Nq x H/4 x W/4` and class logits `B x Nq x 2`
/// (index 0 = moving object, 1 = no object).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mask_logits: Tensor,
    pub class_logits: Tensor,
}

impl Prediction {
    pub fn n_queries(&self) -> Result<usize> {
        Ok(self.class_logits.dims3()?.1)
    }
}

/// Pre-normalized decoder layer: masked cross-attention, self-attention, MLP.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_ca: LayerNorm,
    pub ca: MultiHeadAttention,
    pub ln_sa: LayerNorm,
    pub sa: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, d_ffn: usize) -> Result<Self> {
        Ok(Self {
            ln_ca: LayerNorm::new(ps, &format!("{name}.ln_ca"), d)?,
            ca: MultiHeadAttention::new(ps, &format!("{name}.ca"), d, heads)?,
            ln_sa: LayerNorm::new(ps, &format!("{name}.ln_sa"), d)?,
            sa: MultiHeadAttention::new(ps, &format!("{name}.sa"), d, heads)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, d_ffn, d)?,
        })
    }
}

/// Learned queries, decoder layers and prediction heads of one stream.
#[derive(Clone, Debug)]
pub struct StreamDecoder {
    pub query_feat: Tensor,
    pub query_pos: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub class_head: Linear,
    pub mask_embed: Mlp,
}

impl StreamDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ffn: usize,
        n_layers: usize,
        n_queries: usize,
    ) -> Result<Self> {
        Ok(Self {
            query_feat: ps.param(&format!("{name}.query_feat"), &[n_queries, d], Init::Normal(1.0))?,
            query_pos: ps.param(&format!("{name}.query_pos"), &[n_queries, d], Init::Normal(1.0))?,
            layers: (0..n_layers)
                .map(|i| DecoderLayer::new(ps, &format!("{name}.layers.{i}"), d, heads, d_ffn))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d)?,
            class_head: Linear::new(ps, &format!("{name}.class_head"), d, 2)?,
            mask_embed: Mlp::new(ps, &format!("{name}.mask_embed"), d, d, d)?,
        })
    }

    /// Class and mask logits of query states `B x Nq x d`.
    pub fn predict(&self, q: &Tensor, mask_features: &Tensor) -> Result<Prediction> {
        let qn = self.norm.forward(q)?;
        let class_logits = self.class_head.forward(&qn)?;
        let emb = self.mask_embed.forward(&qn)?;
        let (b, d, h, w) = mask_features.dims4()?;
        let nq = emb.dims()[1];
        let mask_logits = emb.matmul(&mask_features.reshape((b, d, h * w))?)?.reshape((b, nq, h, w))?;
        Ok(Prediction { mask_logits, class_logits })
    }
}

/// Shared bottleneck queries of the MBT decoder.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub feat: Tensor,
    pub pos: Tensor,
    pub layers: Vec<DecoderLayer>,
}

impl Bottleneck {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ffn: usize,
        n_layers: usize,
        n: usize,
    ) -> Result<Self> {
        Ok(Self {
            feat: ps.param(&format!("{name}.feat"), &[n, d], Init::Normal(1.0))?,
            pos: ps.param(&format!("{name}.pos"), &[n, d], Init::Normal(1.0))?,
            layers: (0..n_layers)
                .map(|i| DecoderLayer::new(ps, &format!("{name}.layers.{i}"), d, heads, d_ffn))
                .collect::<Result<_>>()?,
        })
    }
}

/// Encoded features of one stream as seen by the decoder.
#[derive(Clone, Debug)]
pub struct StreamMemory {
    /// Tokens `B x T_l x d` per level (strides 8, 16, 32).
    pub levels: Vec<Tensor>,
    /// Positions `1 x T_l x d` per level.
    pub pos: Vec<Tensor>,
    pub shapes: Vec<LevelShape>,
    /// `B x d x H/4 x W/4`.
    pub mask_features: Tensor,
}

/// Level used by decoder layer `i`: 1/32, 1/16, 1/8, 1/32, ...
pub fn decoder_level(i: usize) -> usize {
    N_LEVELS - 1 - (i % N_LEVELS)
}

/// Bilinear (half-pixel centred) resampling of a row-major `h x w` map.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(nh * nw);
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f64;
            let v = (1.0 - ay) * ((1.0 - ax) * src[y0 * w + x0] as f64 + ax * src[y0 * w + x1] as f64)
                + ay * ((1.0 - ax) * src[y1 * w + x0] as f64 + ax * src[y1 * w + x1] as f64);
            out.push(v as f32);
        }
    }
    out
}

/// Binarized (`sigmoid > 0.5`) mask prediction resampled to `level`.
pub fn attention_mask(pred: &Prediction, level: LevelShape) -> Result<AttentionMask> {
    let (b, nq, h, w) = pred.mask_logits.dims4()?;
    let logits = to_host(&pred.mask_logits)?;
    let mut allow = Vec::with_capacity(b * nq * level.len());
    for m in logits.chunks(h * w) {
        allow.extend(resize_bilinear(m, h, w, level.h, level.w).into_iter().map(|v| v > 0.0));
    }
    AttentionMask::new(b, nq, level.len(), allow)
}

fn repeat_tokens(mask: &AttentionMask, times: usize) -> Result<AttentionMask> {
    let mut m = mask.clone();
    for _ in 1..times {
        m = m.concat_tokens(mask)?;
    }
    Ok(m)
}

fn expand_queries(x: &Tensor, b: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    Ok(x.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?)
}

/// Runs the decoder of every stream and returns `n_layers + 1` predictions
/// per stream (initial queries first).
pub fn decode(
    decoders: &[&StreamDecoder],
    memories: &[StreamMemory],
    mechanism: Mechanism,
    bottleneck: Option<&Bottleneck>,
    stats: Option<&AttnStats>,
) -> Result<Vec<Vec<Prediction>>> {
    let n_streams = decoders.len();
    if n_streams == 0 || memories.len() != n_streams {
        return Err(Error::InvalidConfig(format!("{n_streams} decoders for {} memories", memories.len())));
    }
    let fused = mechanism.is_fused();
    if fused != (n_streams == 2) || (!fused && n_streams != 1) {
        return Err(Error::InvalidConfig(format!("mechanism {mechanism} with {n_streams} streams")));
    }
    if (mechanism == Mechanism::MbtDecoder) != bottleneck.is_some() {
        return Err(Error::InvalidConfig("bottleneck queries exist exactly for the mbt decoder".into()));
    }
    let n_layers = decoders[0].layers.len();
    let b = memories[0].mask_features.dims4()?.0;
    let nq = decoders[0].query_feat.dims2()?.0;

    let mut q: Vec<Tensor> = decoders.iter().map(|d| expand_queries(&d.query_feat, b)).collect::<Result<_>>()?;
    let qpos: Vec<Tensor> = decoders.iter().map(|d| expand_queries(&d.query_pos, b)).collect::<Result<_>>()?;
    let mut bq = bottleneck.map(|bn| expand_queries(&bn.feat, b)).transpose()?;
    let bpos = bottleneck.map(|bn| expand_queries(&bn.pos, b)).transpose()?;

    let mut preds: Vec<Vec<Prediction>> = vec![Vec::with_capacity(n_layers + 1); n_streams];
    for s in 0..n_streams {
        preds[s].push(decoders[s].predict(&q[s], &memories[s].mask_features)?);
    }

    for li in 0..n_layers {
        let lvl = decoder_level(li);
        let shape = memories[0].shapes[lvl];
        let t = shape.len();
        let layer: Vec<&DecoderLayer> = decoders.iter().map(|d| &d.layers[li]).collect();
        let masks: Vec<AttentionMask> =
            preds.iter().map(|p| attention_mask(p.last().unwrap(), shape)).collect::<Result<_>>()?;
        let mem: Vec<&Tensor> = memories.iter().map(|m| &m.levels[lvl]).collect();
        let mem_k: Vec<Tensor> =
            memories.iter().map(|m| m.levels[lvl].broadcast_add(&m.pos[lvl])).collect::<candle_core::Result<_>>()?;

        // masked cross-attention
        let qn: Vec<Tensor> = (0..n_streams).map(|s| layer[s].ln_ca.forward(&q[s])).collect::<Result<_>>()?;
        let bln = bottleneck.map(|bn| bn.layers[li].ln_ca.forward(bq.as_ref().unwrap())).transpose()?;
        let mut ca_out = Vec::with_capacity(n_streams);
        match mechanism {
            Mechanism::Single | Mechanism::Encoder => {
                for s in 0..n_streams {
                    let a = &layer[s].ca;
                    let bias = masks[s].bias(q[s].dtype())?;
                    ca_out.push(a.forward(&(&qn[s] + &qpos[s])?, &mem_k[s], mem[s], bias.as_ref())?);
                    count(stats, |st| st.add_cross(b * nq * t));
                }
            }
            Mechanism::Decoder | Mechanism::EncoderDecoder => {
                let k = Tensor::cat(
                    &(0..n_streams).map(|s| layer[s].ca.k.forward(&mem_k[s])).collect::<Result<Vec<_>>>()?,
                    1,
                )?;
                let v = Tensor::cat(
                    &(0..n_streams).map(|s| layer[s].ca.v.forward(mem[s])).collect::<Result<Vec<_>>>()?,
                    1,
                )?;
                for s in 0..n_streams {
                    let a = &layer[s].ca;
                    let bias = repeat_tokens(&masks[s], n_streams)?.bias(q[s].dtype())?;
                    let qq = a.q.forward(&(&qn[s] + &qpos[s])?)?;
                    ca_out.push(a.o.forward(&a.attend(&qq, &k, &v, bias.as_ref())?)?);
                    count(stats, |st| st.add_cross(b * nq * n_streams * t));
                }
            }
            Mechanism::MbtDecoder => {
                let (bln, bpos) = (bln.as_ref().unwrap(), bpos.as_ref().unwrap());
                let nb = bln.dims()[1];
                let bk_in = (bln + bpos)?;
                for s in 0..n_streams {
                    let a = &layer[s].ca;
                    let k = Tensor::cat(&[a.k.forward(&mem_k[s])?, a.k.forward(&bk_in)?], 1)?;
                    let v = Tensor::cat(&[a.v.forward(mem[s])?, a.v.forward(bln)?], 1)?;
                    let mask = masks[s].concat_tokens(&AttentionMask::full(b, nq, nb))?;
                    let bias = mask.bias(q[s].dtype())?;
                    let qq = a.q.forward(&(&qn[s] + &qpos[s])?)?;
                    ca_out.push(a.o.forward(&a.attend(&qq, &k, &v, bias.as_ref())?)?);
                    count(stats, |st| st.add_cross(b * nq * (t + nb)));
                }
                let ba = &bottleneck.unwrap().layers[li].ca;
                let k = Tensor::cat(&mem_k.iter().map(|m| ba.k.forward(m)).collect::<Result<Vec<_>>>()?, 1)?;
                let v = Tensor::cat(&mem.iter().map(|m| ba.v.forward(m)).collect::<Result<Vec<_>>>()?, 1)?;
                let out = ba.o.forward(&ba.attend(&ba.q.forward(&bk_in)?, &k, &v, None)?)?;
                bq = Some((bq.as_ref().unwrap() + out)?);
                count(stats, |st| st.add_cross(b * nb * n_streams * t));
            }
        }
        for (s, o) in ca_out.into_iter().enumerate() {
            q[s] = (&q[s] + o)?;
        }

        // self-attention
        let qn: Vec<Tensor> = (0..n_streams).map(|s| layer[s].ln_sa.forward(&q[s])).collect::<Result<_>>()?;
        let qk: Vec<Tensor> = (0..n_streams).map(|s| &qn[s] + &qpos[s]).collect::<candle_core::Result<_>>()?;
        let mut sa_out = Vec::with_capacity(n_streams);
        match mechanism {
            Mechanism::Single | Mechanism::Encoder => {
                for s in 0..n_streams {
                    sa_out.push(layer[s].sa.forward(&qk[s], &qk[s], &qn[s], None)?);
                    count(stats, |st| st.add_self(b * nq * nq));
                }
            }
            Mechanism::Decoder | Mechanism::EncoderDecoder => {
                let k = Tensor::cat(
                    &(0..n_streams).map(|s| layer[s].sa.k.forward(&qk[s])).collect::<Result<Vec<_>>>()?,
                    1,
                )?;
                let v = Tensor::cat(
                    &(0..n_streams).map(|s| layer[s].sa.v.forward(&qn[s])).collect::<Result<Vec<_>>>()?,
                    1,
                )?;
                for s in 0..n_streams {
                    let a = &layer[s].sa;
                    sa_out.push(a.o.forward(&a.attend(&a.q.forward(&qk[s])?, &k, &v, None)?)?);
                    count(stats, |st| st.add_self(b * nq * n_streams * nq));
                }
            }
            Mechanism::MbtDecoder => {
                let bl = &bottleneck.unwrap().layers[li];
                let bn = bl.ln_sa.forward(bq.as_ref().unwrap())?;
                let bk = (&bn + bpos.as_ref().unwrap())?;
                let nb = bn.dims()[1];
                for s in 0..n_streams {
                    let a = &layer[s].sa;
                    let k = Tensor::cat(&[a.k.forward(&qk[s])?, a.k.forward(&bk)?], 1)?;
                    let v = Tensor::cat(&[a.v.forward(&qn[s])?, a.v.forward(&bn)?], 1)?;
                    sa_out.push(a.o.forward(&a.attend(&a.q.forward(&qk[s])?, &k, &v, None)?)?);
                    count(stats, |st| st.add_self(b * nq * (nq + nb)));
                }
                let out = bl.sa.forward(&bk, &bk, &bn, None)?;
                count(stats, |st| st.add_self(b * nb * nb));
                let bcur = (bq.as_ref().unwrap() + out)?;
                let ffn = bl.mlp.forward(&bl.ln_ffn.forward(&bcur)?)?;
                bq = Some((bcur + ffn)?);
            }
        }
        for (s, o) in sa_out.into_iter().enumerate() {
            let y = (&q[s] + o)?;
            q[s] = (layer[s].mlp.forward(&layer[s].ln_ffn.forward(&y)?)? + y)?;
            preds[s].push(decoders[s].predict(&q[s], &memories[s].mask_features)?);
        }
    }
    Ok(preds)
}

fn count(stats: Option<&AttnStats>, f: impl FnOnce(&AttnStats)) {
    if let Some(s) = stats {
        f(s)
    }
}
