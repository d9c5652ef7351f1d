//! Moving-object instance segmentation from two frames.
//!
//! The crate pairs an appearance stream (frame 1) with a motion stream
//! (optical flow, scene flow or a generic motion embedding) and fuses them
//! inside a masked-attention transformer. Around the model sit the pieces
//! needed to train and judge it without external data:
//!
//! - [`synthscene`]: deterministic two-frame scene generator with exact flow,
//!   scene flow, depth, instance masks and motion labels, plus the on-disk
//!   dataset format.
//! - [`motionrep`]: motion encodings, normalization, negative-example
//!   augmentation and scale/shift depth alignment.
//! - [`fusion`]: attention primitives, deformable encoder, masked decoder,
//!   the fusion mechanisms and the output fusion head.
//! - [`losses`]: Hungarian matching and point-sampled mask/class losses.
//! - [`trainer`]: optimizer, schedules, augmentation, two-phase training.
//! - [`eval`]: AP family, Pu/Ru/Fu, bg/obj precision, FP/FN per frame.
//! - [`cli`]: the `gen`/`train`/`eval`/`infer`/`bench` commands.

// `!(x > 0.0)` style checks reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod motionrep;
pub mod nn;
pub mod synthscene;
pub mod trainer;

pub use error::{Error, Result};
