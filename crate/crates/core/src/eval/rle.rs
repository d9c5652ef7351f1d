use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major run-length encoding of a binary mask. `counts` alternate
/// between runs of 0 and runs of 1 and always start with a (possibly empty)
/// run of 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn encode(mask: &Array2<bool>) -> Rle {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.iter() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub fn decode(rle: &Rle) -> Result<Array2<bool>> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::format("rle", format!("covers {total} pixels, mask has {}", h * w)));
    }
    let mut flat = Vec::with_capacity(h * w);
    for (i, &c) in rle.counts.iter().enumerate() {
        flat.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(Array2::from_shape_vec((h, w), flat).expect("size checked"))
}
