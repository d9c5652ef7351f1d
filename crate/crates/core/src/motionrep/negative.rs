use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MotionField;
use crate::{Error, Result};

/// Probability of replacing a training sample's motion by a constant field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeAugConfig {
    pub p_neg: f64,
    pub rng_seed: u64,
}

impl NegativeAugConfig {
    pub fn new(p_neg: f64, rng_seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_neg) {
            return Err(Error::InvalidConfig(format!("p_neg = {p_neg} outside [0, 1]")));
        }
        Ok(Self { p_neg, rng_seed })
    }
}

/// With probability `p_neg`, replaces every pixel of each channel by one
/// constant drawn uniformly from that channel's value range and empties the
/// target set. Otherwise returns the inputs untouched. The flag reports the
/// branch taken.
pub fn apply_negative<T, R: Rng + ?Sized>(
    field: MotionField,
    targets: Vec<T>,
    p_neg: f64,
    rng: &mut R,
) -> (MotionField, Vec<T>, bool) {
    let p = p_neg.clamp(0.0, 1.0);
    if !rng.random_bool(p) {
        return (field, targets, false);
    }
    let MotionField { kind, mut data, value_range } = field;
    for (k, mut ch) in data.axis_iter_mut(Axis(2)).enumerate() {
        let (lo, hi) = value_range[k];
        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        ch.fill(v);
    }
    (MotionField { kind, data, value_range }, Vec::new(), true)
}

/// Spatial variance of every channel.
pub fn channel_variance(data: &Array3<f32>) -> Vec<f64> {
    data.axis_iter(Axis(2))
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motionrep::MotionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field() -> MotionField {
        let data = Array3::from_shape_fn((6, 7, 2), |(y, x, c)| (y * 7 + x) as f32 * if c == 0 { 1.0 } else { -0.5 });
        MotionField::new(MotionKind::OpticalFlow, data, vec![(-3.0, 3.0), (-1.0, 2.0)]).unwrap()
    }

    #[test]
    fn p_zero_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let f = field();
            let (out, t, neg) = apply_negative(f.clone(), vec![1, 2], 0.0, &mut rng);
            assert!(!neg);
            assert_eq!(out, f);
            assert_eq!(t, vec![1, 2]);
        }
    }

    #[test]
    fn p_one_is_constant_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (out, t, neg) = apply_negative(field(), vec![1, 2], 1.0, &mut rng);
            assert!(neg);
            assert!(t.is_empty());
            assert!(channel_variance(&out.data).iter().all(|&v| v == 0.0));
            for (k, &(lo, hi)) in out.value_range.iter().enumerate() {
                let v = out.data[[0, 0, k]];
                assert!(v >= lo && v <= hi);
            }
            assert_eq!(out.data.dim(), (6, 7, 2));
            assert_eq!(out.kind, MotionKind::OpticalFlow);
        }
    }

    #[test]
    fn degenerate_range_yields_that_constant() {
        let f = MotionField::new(MotionKind::OpticalFlow, Array3::zeros((3, 3, 2)), vec![(0.5, 0.5), (-2.0, -2.0)])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, _, _) = apply_negative::<u8, _>(f, vec![], 1.0, &mut rng);
        assert!(out.data.index_axis(Axis(2), 0).iter().all(|&v| v == 0.5));
        assert!(out.data.index_axis(Axis(2), 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn config_bounds() {
        assert!(NegativeAugConfig::new(1.5, 0).is_err());
        assert!(NegativeAugConfig::new(-0.1, 0).is_err());
        assert!(NegativeAugConfig::new(0.3, 0).is_ok());
    }
}
