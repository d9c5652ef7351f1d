use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::motionrep::{MotionKind, DEFAULT_EMBEDDING_CHANNELS};
use crate::{Error, Result};

/// How the appearance and motion streams exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    /// One stream, no fusion.
    #[serde(rename = "single")]
    Single,
    /// Concatenated tokens, queries and masks in every decoder layer.
    #[serde(rename = "d")]
    Decoder,
    /// Joint deformable encoder over x-concatenated feature maps.
    #[serde(rename = "e")]
    Encoder,
    #[serde(rename = "ed")]
    EncoderDecoder,
    /// Modality queries exchange information only through bottleneck queries.
    #[serde(rename = "mbt")]
    MbtDecoder,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] =
        [Mechanism::Single, Mechanism::MbtDecoder, Mechanism::Decoder, Mechanism::Encoder, Mechanism::EncoderDecoder];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Single => "single",
            Mechanism::Decoder => "d",
            Mechanism::Encoder => "e",
            Mechanism::EncoderDecoder => "ed",
            Mechanism::MbtDecoder => "mbt",
        }
    }

    pub fn fuses_encoder(self) -> bool {
        matches!(self, Mechanism::Encoder | Mechanism::EncoderDecoder)
    }

    pub fn concat_decoder(self) -> bool {
        matches!(self, Mechanism::Decoder | Mechanism::EncoderDecoder)
    }

    pub fn is_fused(self) -> bool {
        self != Mechanism::Single
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Mechanism::Single,
            "d" | "decoder" => Mechanism::Decoder,
            "e" | "encoder" => Mechanism::Encoder,
            "ed" | "encoder_decoder" => Mechanism::EncoderDecoder,
            "mbt" | "mbt_decoder" => Mechanism::MbtDecoder,
            _ => return Err(Error::InvalidConfig(format!("unknown mechanism {s:?}"))),
        })
    }
}

/// Input of a stream: the first RGB frame or a motion encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Modality {
    Rgb,
    Motion(MotionKind),
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Motion(k) => k.channels(),
        }
    }

    pub fn motion_kind(self) -> Option<MotionKind> {
        match self {
            Modality::Rgb => None,
            Modality::Motion(k) => Some(k),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => f.write_str("rgb"),
            Modality::Motion(MotionKind::OpticalFlow) => f.write_str("of"),
            Modality::Motion(MotionKind::SceneFlow) => f.write_str("sf"),
            Modality::Motion(MotionKind::Embedding { channels }) if *channels == DEFAULT_EMBEDDING_CHANNELS => {
                f.write_str("emb")
            }
            Modality::Motion(MotionKind::Embedding { channels }) => write!(f, "emb:{channels}"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rgb" => Modality::Rgb,
            "of" => Modality::Motion(MotionKind::OpticalFlow),
            "sf" => Modality::Motion(MotionKind::SceneFlow),
            "emb" => Modality::Motion(MotionKind::Embedding { channels: DEFAULT_EMBEDDING_CHANNELS }),
            _ => match s.strip_prefix("emb:").and_then(|c| c.parse::<usize>().ok()) {
                Some(c) if c > 0 => Modality::Motion(MotionKind::Embedding { channels: c }),
                _ => return Err(Error::InvalidConfig(format!("unknown modality {s:?}"))),
            },
        })
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Modality {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mechanism: Mechanism,
    /// Single mechanism: the one stream's input. Fused mechanisms: the motion
    /// stream's input (the appearance stream is always RGB).
    pub modality: Modality,
    pub n_bottleneck: usize,
    /// Skip the per-modality encodings of the joint encoder.
    pub share_positional: bool,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_queries: usize,
    /// Sampling points per level in deformable attention.
    pub n_points: usize,
    /// Channel width of the 1x1 input projection.
    pub in_proj_dim: usize,
    /// Backbone widths at strides 4, 8, 16, 32.
    pub backbone_widths: [usize; 4],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Single,
            modality: Modality::Rgb,
            n_bottleneck: 8,
            share_positional: false,
            n_heads: 4,
            d_model: 128,
            d_ffn: 256,
            n_enc_layers: 6,
            n_dec_layers: 9,
            n_queries: 100,
            n_points: 4,
            in_proj_dim: 16,
            backbone_widths: [32, 64, 128, 256],
        }
    }
}

/// Number of feature levels the encoder and decoder work on (strides 8, 16, 32).
pub const N_LEVELS: usize = 3;

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_queries == 0 || self.n_dec_layers == 0 || self.n_points == 0 {
            return Err(Error::InvalidConfig("queries, decoder layers and points must be >= 1".into()));
        }
        if self.mechanism == Mechanism::MbtDecoder && self.n_bottleneck == 0 {
            return Err(Error::InvalidConfig("mbt decoder needs n_bottleneck >= 1".into()));
        }
        if self.mechanism.is_fused() && self.modality == Modality::Rgb {
            return Err(Error::InvalidConfig("fused mechanisms need a motion modality".into()));
        }
        if self.backbone_widths.contains(&0) || self.in_proj_dim == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidConfig("zero layer width".into()));
        }
        Ok(())
    }

    /// Stream names in output order.
    pub fn streams(&self) -> Vec<Stream> {
        if self.mechanism.is_fused() {
            vec![Stream::Appearance, Stream::Motion]
        } else if self.modality == Modality::Rgb {
            vec![Stream::Appearance]
        } else {
            vec![Stream::Motion]
        }
    }

    pub fn stream_modality(&self, s: Stream) -> Modality {
        match s {
            Stream::Appearance => Modality::Rgb,
            Stream::Motion => self.modality,
        }
    }

    /// Prediction sets per forward pass: the initial queries plus one per
    /// decoder layer.
    pub fn n_prediction_sets(&self) -> usize {
        self.n_dec_layers + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    /// Parameter-path prefix of the stream.
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Appearance => "rgb",
            Stream::Motion => "motion",
        }
    }
}
