use candle_core::{Tensor, D};

use super::decoder::Prediction;
use crate::nn::{Linear, ParamStore};
use crate::{Error, Result};

/// Pairs query `i` of both streams: mask logits through a 1x1 convolution
/// over the 2-channel stack, class logits through a linear map of the
/// concatenated 4-vector.
#[derive(Clone, Debug)]
pub struct OutputFusion {
    /// `2` weights of the 1x1 mask convolution.
    pub mask_weight: Tensor,
    pub mask_bias: Tensor,
    pub class: Linear,
}

impl OutputFusion {
    /// Starts as the average of both streams.
    pub fn new(ps: &mut ParamStore, name: &str) -> Result<Self> {
        let mw = format!("{name}.mask.weight");
        let mb = format!("{name}.mask.bias");
        let mask_weight = ps.param(&mw, &[2], crate::nn::Init::Zeros)?;
        let mask_bias = ps.param(&mb, &[1], crate::nn::Init::Zeros)?;
        ps.set(&mw, &[0.5, 0.5])?;
        let class = Linear::zeros(ps, &format!("{name}.class"), 4, 2)?;
        ps.set(&format!("{name}.class.weight"), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5])?;
        Ok(Self { mask_weight, mask_bias, class })
    }

    pub fn fuse(&self, rgb: &Prediction, motion: &Prediction) -> Result<Prediction> {
        if rgb.mask_logits.dims() != motion.mask_logits.dims() || rgb.class_logits.dims() != motion.class_logits.dims()
        {
            return Err(Error::Shape(format!(
                "cannot pair predictions {:?} and {:?}",
                rgb.mask_logits.dims(),
                motion.mask_logits.dims()
            )));
        }
        let w0 = self.mask_weight.narrow(0, 0, 1)?;
        let w1 = self.mask_weight.narrow(0, 1, 1)?;
        let mask_logits = rgb
            .mask_logits
            .broadcast_mul(&w0)?
            .add(&motion.mask_logits.broadcast_mul(&w1)?)?
            .broadcast_add(&self.mask_bias)?;
        let class_logits = self.class.forward(&Tensor::cat(&[&rgb.class_logits, &motion.class_logits], D::Minus1)?)?;
        Ok(Prediction { mask_logits, class_logits })
    }
}
