//! Two-stream appearance + motion segmentation transformer.
//!
//! Each stream runs a 1x1 input projection, a strided convolutional
//! backbone, a multi-scale deformable encoder over strides 8/16/32 and a
//! masked-attention decoder whose queries predict one mask and one
//! moving/no-object score each. Streams exchange information according to
//! [`Mechanism`]; fused models pair the queries of both streams in an
//! output fusion head.

mod attention;
mod backbone;
pub mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod head;
mod model;

pub use attention::{
    masked_cross_attention, mca, msa, AttentionMask, AttnStats, MultiHeadAttention, PairCounts, TransformerLayer,
};
pub use backbone::Backbone;
pub use checkpoint::Checkpoint;
pub use config::{FusionConfig, Mechanism, Modality, Stream, N_LEVELS};
pub use decoder::{
    attention_mask, decode, decoder_level, resize_bilinear, Bottleneck, DecoderLayer, Prediction, StreamDecoder,
    StreamMemory,
};
pub use encoder::{
    deformable_attention, encode, flatten_levels, level_starts, positions_tensor, sine_positions, split_levels,
    total_tokens, DeformInput, DeformableAttention, EncoderLayer, LevelShape,
};
pub use head::OutputFusion;
pub use model::{
    expected_pairs, level_shapes, mask_shape, FusionModel, ModelInput, ModelOutput, StreamFeatures, StreamNet,
};
