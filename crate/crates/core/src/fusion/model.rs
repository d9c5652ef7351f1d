use candle_core::{DType, Tensor};

use super::attention::{AttnStats, PairCounts};
use super::backbone::Backbone;
use super::checkpoint::Checkpoint;
use super::config::{FusionConfig, Mechanism, Stream, N_LEVELS};
use super::decoder::{decode, decoder_level, Bottleneck, Prediction, StreamDecoder, StreamMemory};
use super::encoder::{encode, flatten_levels, level_starts, positions_tensor, EncoderLayer, LevelShape};
use super::head::OutputFusion;
use crate::nn::{conv_out, to_host, Conv2d, Init, ParamStore};
use crate::{Error, Result};

/// Parameters of one stream up to and including its decoder.
#[derive(Clone, Debug)]
pub struct StreamNet {
    pub stream: Stream,
    pub in_proj: Conv2d,
    pub backbone: Backbone,
    pub input_proj: Vec<Conv2d>,
    pub level_embed: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub lateral: Conv2d,
    pub mask_conv: Conv2d,
    pub decoder: StreamDecoder,
}

/// Backbone features of a stream, flattened for the encoder.
#[derive(Clone, Debug)]
pub struct StreamFeatures {
    /// `B x T x d`, levels at strides 8, 16, 32.
    pub tokens: Tensor,
    /// `1 x T x d` sine positions plus level embeddings.
    pub pos: Tensor,
    pub shapes: Vec<LevelShape>,
    /// Stride-4 backbone map.
    pub stride4: Tensor,
}

impl StreamNet {
    pub fn new(ps: &mut ParamStore, cfg: &FusionConfig, stream: Stream) -> Result<Self> {
        let p = stream.prefix();
        let d = cfg.d_model;
        let w = cfg.backbone_widths;
        let c_in = cfg.stream_modality(stream).channels();
        Ok(Self {
            stream,
            in_proj: Conv2d::new(ps, &format!("{p}.in_proj"), c_in, cfg.in_proj_dim, 1, 1)?,
            backbone: Backbone::new(ps, &format!("{p}.backbone"), cfg.in_proj_dim, w)?,
            input_proj: (0..N_LEVELS)
                .map(|l| Conv2d::new(ps, &format!("{p}.input_proj.{l}"), w[l + 1], d, 1, 1))
                .collect::<Result<_>>()?,
            level_embed: ps.param(&format!("{p}.level_embed"), &[N_LEVELS, d], Init::Normal(1.0))?,
            encoder: (0..cfg.n_enc_layers)
                .map(|i| {
                    EncoderLayer::new(
                        ps,
                        &format!("{p}.encoder.{i}"),
                        d,
                        cfg.d_ffn,
                        cfg.n_heads,
                        N_LEVELS,
                        cfg.n_points,
                    )
                })
                .collect::<Result<_>>()?,
            lateral: Conv2d::new(ps, &format!("{p}.lateral"), w[0], d, 1, 1)?,
            mask_conv: Conv2d::new(ps, &format!("{p}.mask_features"), d, d, 3, 1)?,
            decoder: StreamDecoder::new(
                ps,
                &format!("{p}.decoder"),
                d,
                cfg.n_heads,
                cfg.d_ffn,
                cfg.n_dec_layers,
                cfg.n_queries,
            )?,
        })
    }

    /// `x`: `B x C x H x W` input of the stream.
    pub fn features(&self, x: &Tensor) -> Result<StreamFeatures> {
        let feats = self.backbone.forward(&self.in_proj.forward(x)?)?;
        let maps: Vec<Tensor> =
            (0..N_LEVELS).map(|l| self.input_proj[l].forward(&feats[l + 1])).collect::<Result<_>>()?;
        let (tokens, shapes) = flatten_levels(&maps)?;
        let d = tokens.dims()[2];
        let sine = positions_tensor(&shapes, d, tokens.dtype())?;
        let lvl: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(l, s)| Ok(self.level_embed.narrow(0, l, 1)?.broadcast_as((s.len(), d))?))
            .collect::<Result<_>>()?;
        let pos = sine.broadcast_add(&Tensor::cat(&lvl, 0)?.unsqueeze(0)?)?;
        Ok(StreamFeatures { tokens, pos, shapes, stride4: feats[0].clone() })
    }

    /// Decoder view of encoded tokens: per-level tokens and the stride-4
    /// mask features (lateral stride-4 map plus the nearest-upsampled
    /// stride-8 level).
    pub fn memory(
        &self,
        encoded: &Tensor,
        pos: &Tensor,
        shapes: &[LevelShape],
        stride4: &Tensor,
    ) -> Result<StreamMemory> {
        let starts = level_starts(shapes);
        let levels: Vec<Tensor> = shapes
            .iter()
            .zip(&starts)
            .map(|(s, &st)| encoded.narrow(1, st, s.len()))
            .collect::<candle_core::Result<_>>()?;
        let pos: Vec<Tensor> = shapes
            .iter()
            .zip(&starts)
            .map(|(s, &st)| pos.narrow(1, st, s.len()))
            .collect::<candle_core::Result<_>>()?;
        let (b, _, h4, w4) = stride4.dims4()?;
        let s8 = shapes[0];
        let d = encoded.dims()[2];
        let idx: Vec<u32> = (0..h4 * w4)
            .map(|i| {
                let (y, x) = ((i / w4) / 2, (i % w4) / 2);
                (y.min(s8.h - 1) * s8.w + x.min(s8.w - 1)) as u32
            })
            .collect();
        let idx = Tensor::from_vec(idx, h4 * w4, encoded.device())?;
        let up = levels[0].transpose(1, 2)?.contiguous()?.index_select(&idx, 2)?.reshape((b, d, h4, w4))?;
        let mask_features = self.mask_conv.forward(&(self.lateral.forward(stride4)? + up)?)?;
        Ok(StreamMemory { levels, pos, shapes: shapes.to_vec(), mask_features })
    }
}

/// Network inputs, `B x C x H x W`.
#[derive(Clone, Debug, Default)]
pub struct ModelInput {
    pub rgb: Option<Tensor>,
    pub motion: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `n_dec_layers + 1` prediction sets; the last is the final one.
    pub predictions: Vec<Prediction>,
    /// Per-stream predictions before output fusion, in stream order.
    pub streams: Vec<Vec<Prediction>>,
}

/// Appearance and/or motion streams plus fusion parameters.
#[derive(Debug)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub params: ParamStore,
    pub streams: Vec<StreamNet>,
    /// Per-modality encodings of the joint encoder, `2 x d`.
    pub modality_embed: Option<Tensor>,
    pub bottleneck: Option<Bottleneck>,
    pub fusion: Option<OutputFusion>,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let streams: Vec<StreamNet> =
            cfg.streams().into_iter().map(|s| StreamNet::new(&mut ps, &cfg, s)).collect::<Result<_>>()?;
        let modality_embed = if cfg.mechanism.fuses_encoder() && !cfg.share_positional {
            Some(ps.param("fuse.modality_embed", &[2, cfg.d_model], Init::Normal(0.02))?)
        } else {
            None
        };
        let bottleneck = if cfg.mechanism == Mechanism::MbtDecoder {
            Some(Bottleneck::new(
                &mut ps,
                "fuse.bottleneck",
                cfg.d_model,
                cfg.n_heads,
                cfg.d_ffn,
                cfg.n_dec_layers,
                cfg.n_bottleneck,
            )?)
        } else {
            None
        };
        let fusion = if cfg.mechanism.is_fused() { Some(OutputFusion::new(&mut ps, "fuse.head")?) } else { None };
        Ok(Self { cfg, params: ps, streams, modality_embed, bottleneck, fusion })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn input_for<'a>(&self, input: &'a ModelInput, s: Stream) -> Result<&'a Tensor> {
        let t = match s {
            Stream::Appearance => input.rgb.as_ref(),
            Stream::Motion => input.motion.as_ref(),
        };
        let t = t.ok_or_else(|| Error::InvalidConfig(format!("missing {} input", s.prefix())))?;
        let c = self.cfg.stream_modality(s).channels();
        if t.rank() != 4 || t.dims()[1] != c {
            return Err(Error::Shape(format!("{} input {:?}, expected B x {c} x H x W", s.prefix(), t.dims())));
        }
        Ok(t)
    }

    /// Full pipeline: input projection, backbone, encoder, decoder and (for
    /// fused mechanisms) output fusion.
    pub fn forward(&self, input: &ModelInput, stats: Option<&AttnStats>) -> Result<ModelOutput> {
        let mut feats = Vec::with_capacity(self.streams.len());
        for net in &self.streams {
            let x = self.input_for(input, net.stream)?.to_dtype(self.dtype())?;
            feats.push(net.features(&x)?);
        }
        if feats.len() == 2
            && (feats[0].shapes != feats[1].shapes || feats[0].stride4.dims()[2..] != feats[1].stride4.dims()[2..])
        {
            return Err(Error::Shape("appearance and motion inputs differ in size".into()));
        }
        let joint = self.cfg.mechanism.fuses_encoder();
        let mut tokens: Vec<Tensor> = feats.iter().map(|f| f.tokens.clone()).collect();
        if let (true, Some(me)) = (joint, &self.modality_embed) {
            for (s, t) in tokens.iter_mut().enumerate() {
                *t = t.broadcast_add(&me.narrow(0, s, 1)?)?;
            }
        }
        let layers: Vec<&[EncoderLayer]> = self.streams.iter().map(|n| n.encoder.as_slice()).collect();
        let pos: Vec<Tensor> = feats.iter().map(|f| f.pos.clone()).collect();
        let encoded = encode(&layers, tokens, &pos, &feats[0].shapes, joint, stats)?;
        let memories: Vec<StreamMemory> = self
            .streams
            .iter()
            .zip(&feats)
            .zip(&encoded)
            .map(|((net, f), e)| net.memory(e, &f.pos, &f.shapes, &f.stride4))
            .collect::<Result<_>>()?;
        let decoders: Vec<&StreamDecoder> = self.streams.iter().map(|n| &n.decoder).collect();
        let streams = decode(&decoders, &memories, self.cfg.mechanism, self.bottleneck.as_ref(), stats)?;
        let predictions = match &self.fusion {
            Some(head) => streams[0].iter().zip(&streams[1]).map(|(a, b)| head.fuse(a, b)).collect::<Result<_>>()?,
            None => streams[0].clone(),
        };
        Ok(ModelOutput { predictions, streams })
    }

    /// Parameters updated with the reduced backbone learning rate.
    pub fn is_backbone_param(name: &str) -> bool {
        name.contains(".backbone.")
    }

    /// Checkpoint of every parameter with the config.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint { config: serde_json::to_value(&self.cfg)?, meta, ..Default::default() };
        for (name, var) in self.params.iter() {
            ck.tensors.insert(name.clone(), (var.dims().to_vec(), to_host(var.as_tensor())?));
        }
        Ok(ck)
    }

    /// Rebuilds a model from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg: FusionConfig = serde_json::from_value(ck.config.clone())?;
        let model = Self::new(cfg, 0, dtype)?;
        model.load_params(ck, "", "")?;
        for name in model.params.names() {
            if !ck.tensors.contains_key(&name) {
                return Err(Error::Checkpoint(format!("checkpoint lacks parameter {name}")));
            }
        }
        Ok(model)
    }

    /// Copies checkpoint tensors whose name starts with `from` onto the
    /// parameters with that prefix replaced by `to`. Returns the count.
    pub fn load_params(&self, ck: &Checkpoint, from: &str, to: &str) -> Result<usize> {
        let mut n = 0;
        for (name, (shape, data)) in ck.tensors.iter().filter(|(k, _)| k.starts_with(from)) {
            let target = format!("{to}{}", &name[from.len()..]);
            let var = self
                .params
                .get(&target)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {target}")))?;
            if var.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{target}: checkpoint shape {shape:?}, model {:?}", var.dims())));
            }
            self.params.set(&target, data)?;
            n += 1;
        }
        Ok(n)
    }
}

/// Feature-level sizes (strides 8, 16, 32) for an `h x w` input.
pub fn level_shapes(h: usize, w: usize) -> Vec<LevelShape> {
    let mut s = (conv_out(h, 3, 2), conv_out(w, 3, 2));
    let mut out = Vec::new();
    for i in 0..4 {
        s = (conv_out(s.0, 3, 2), conv_out(s.1, 3, 2));
        if i >= 1 {
            out.push(LevelShape { h: s.0, w: s.1 });
        }
    }
    out
}

/// Mask-logit resolution for an `h x w` input.
pub fn mask_shape(h: usize, w: usize) -> (usize, usize) {
    (conv_out(conv_out(h, 3, 2), 3, 2), conv_out(conv_out(w, 3, 2), 3, 2))
}

/// Closed-form attention-pair counts of one forward pass on one `h x w`
/// sample.
pub fn expected_pairs(cfg: &FusionConfig, h: usize, w: usize) -> PairCounts {
    let shapes = level_shapes(h, w);
    let t_all: usize = shapes.iter().map(LevelShape::len).sum();
    let s = cfg.streams().len() as u64;
    let (nq, nb) = (cfg.n_queries as u64, cfg.n_bottleneck as u64);
    let encoder = cfg.n_enc_layers as u64 * s * t_all as u64 * (N_LEVELS * cfg.n_points) as u64;
    let (mut cross, mut self_attn) = (0u64, 0u64);
    for i in 0..cfg.n_dec_layers {
        let t = shapes[decoder_level(i)].len() as u64;
        match cfg.mechanism {
            Mechanism::Single => {
                cross += nq * t;
                self_attn += nq * nq;
            }
            Mechanism::Encoder => {
                cross += 2 * nq * t;
                self_attn += 2 * nq * nq;
            }
            Mechanism::Decoder | Mechanism::EncoderDecoder => {
                cross += (2 * nq) * (2 * t);
                self_attn += (2 * nq) * (2 * nq);
            }
            Mechanism::MbtDecoder => {
                cross += nq * (t + nb) * 2 + nb * 2 * t;
                self_attn += 2 * nq * (nq + nb) + nb * nb;
            }
        }
    }
    PairCounts { encoder, cross, self_attn }
}
