//! Hungarian matching and the set-prediction loss on a hand-made prediction.

use candle_core::{Device, Tensor};
use motionseg::fusion::Prediction;
use motionseg::losses::{total_loss, LossWeights, PointConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motionseg::Result<()> {
    let (h, w, nq) = (16, 16, 3);
    let left = Array2::from_shape_fn((h, w), |(_, x)| x < 6);
    let square = Array2::from_shape_fn((h, w), |(y, x)| (9..14).contains(&y) && (9..14).contains(&x));
    // query 0 covers the square, query 2 the left band, query 1 nothing
    let mut logits = vec![-4f32; nq * h * w];
    for y in 0..h {
        for x in 0..w {
            if square[[y, x]] {
                logits[y * w + x] = 4.0;
            }
            if left[[y, x]] {
                logits[2 * h * w + y * w + x] = 4.0;
            }
        }
    }
    let classes = vec![3f32, -3.0, -2.0, 2.0, 3.0, -3.0];
    let pred = Prediction {
        mask_logits: Tensor::from_vec(logits, (1, nq, h, w), &Device::Cpu)?,
        class_logits: Tensor::from_vec(classes, (1, nq, 2), &Device::Cpu)?,
    };
    let pc = PointConfig { k: 256, ..Default::default() };
    let out =
        total_loss(&[pred], &[vec![left, square]], &LossWeights::default(), &pc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let a = &out.assignments[0][0];
    println!("matched (query, target): {:?}, unmatched queries {:?}", a.pairs, a.unmatched());
    println!("loss {:.4}: {:?}", out.terms.total(), out.terms);
    Ok(())
}
