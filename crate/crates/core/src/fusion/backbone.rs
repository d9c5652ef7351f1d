use candle_core::Tensor;

use crate::nn::{Conv2d, ParamStore};
use crate::Result;

/// Strided convolutional feature extractor: stride-2 stem, then four stages
/// at strides 4, 8, 16 and 32, each a strided 3x3 convolution followed by a
/// stride-1 3x3 convolution, with ReLU activations.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stages: Vec<(Conv2d, Conv2d)>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, widths: [usize; 4]) -> Result<Self> {
        let stem_w = (widths[0] / 2).max(8);
        let stem = Conv2d::new(ps, &format!("{name}.stem"), c_in, stem_w, 3, 2)?;
        let mut stages = Vec::new();
        let mut c = stem_w;
        for (i, &w) in widths.iter().enumerate() {
            let down = Conv2d::new(ps, &format!("{name}.stage{i}.down"), c, w, 3, 2)?;
            let conv = Conv2d::new(ps, &format!("{name}.stage{i}.conv"), w, w, 3, 1)?;
            stages.push((down, conv));
            c = w;
        }
        Ok(Self { stem, stages })
    }

    /// Feature maps at strides 4, 8, 16, 32.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(x)?.relu()?;
        let mut out = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            h = down.forward(&h)?.relu()?;
            h = (conv.forward(&h)?.relu()? + &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
