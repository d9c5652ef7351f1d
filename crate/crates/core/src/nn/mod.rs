//! Minimal neural-network layer set on top of `candle-core` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names and are
//! initialized deterministically from `(seed, name)`, so two stores built
//! with the same seed and layout hold identical values.

mod layers;
mod store;

pub use layers::{conv_out, layer_norm, relu, sigmoid, softmax_last, Conv2d, LayerNorm, Linear, Mlp};
pub use store::{Init, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::Result;

/// Tensor from host values on the CPU, converted to `dtype`.
pub fn host(values: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattened host copy of any tensor as `f32`.
pub fn to_host(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Flattened host copy as `f64`.
pub fn to_host64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Scalar value of a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(to_host64(t)?[0])
}
