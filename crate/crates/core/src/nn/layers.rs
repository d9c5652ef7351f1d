use candle_core::{Module, Tensor, D};

use super::{Init, ParamStore};
use crate::Result;

/// Row-wise softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Output size of a `k x k` convolution with padding `k / 2` and `stride`.
pub fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let b = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(b))?,
            bias: ps.param(&format!("{name}.bias"), &[d_out], Init::Uniform(b))?,
        })
    }

    /// Linear layer whose parameters start at zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[d_out, d_in], Init::Zeros)?,
            bias: ps.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, Self::EPS)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, d_hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), d_hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Square-kernel convolution with `k / 2` zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::Uniform((6.0 / fan_in).sqrt()))?,
            bias: ps.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            stride,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// `x`: `B x C x H x W`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.kernel();
        let y = if k == 1 && self.stride == 1 {
            // pointwise: a matmul over channels
            let (b, c, h, w) = x.dims4()?;
            let o = self.weight.dims()[0];
            let wm = self.weight.reshape((o, c))?;
            wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?.reshape((b, o, h, w))?
        } else {
            x.conv2d(&self.weight, k / 2, self.stride, 1, 1)?
        };
        let o = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)?)
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        Linear::forward(self, xs).map_err(|e| candle_core::Error::Msg(e.to_string()))
    }
}
