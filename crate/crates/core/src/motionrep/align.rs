use ndarray::Array2;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    pub aligned: Array2<f64>,
}

/// Least-squares `scale` and `shift` with `scale * pred + shift ~ reference`
/// over the valid pixels.
pub fn align_depth(pred: &Array2<f64>, reference: &Array2<f64>, valid: &Array2<bool>) -> Result<DepthAlignment> {
    if pred.dim() != reference.dim() || pred.dim() != valid.dim() {
        return Err(Error::Shape(format!(
            "pred {:?}, reference {:?}, valid {:?}",
            pred.dim(),
            reference.dim(),
            valid.dim()
        )));
    }
    let pairs: Vec<(f64, f64)> =
        pred.iter().zip(reference.iter()).zip(valid.iter()).filter(|(_, &ok)| ok).map(|((&p, &r), _)| (p, r)).collect();
    if pairs.len() < 2 {
        return Err(Error::RankDeficient(format!("{} valid pixels, need at least 2", pairs.len())));
    }
    let n = pairs.len() as f64;
    let p_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let r_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut spp, mut spr) = (0.0, 0.0);
    for &(p, r) in &pairs {
        spp += (p - p_mean) * (p - p_mean);
        spr += (p - p_mean) * (r - r_mean);
    }
    let spread = pairs.iter().map(|p| (p.0 - p_mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * p_mean.abs().max(1.0) {
        return Err(Error::RankDeficient("prediction is constant over the valid pixels".into()));
    }
    let scale = spr / spp;
    let shift = r_mean - scale * p_mean;
    let aligned = pred.mapv(|p| scale * p + shift);
    Ok(DepthAlignment { scale, shift, aligned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_affine_recovered() {
        let pred = array![[1.0, 2.0], [3.0, 5.0]];
        let reference = pred.mapv(|p| 2.0 * p + 1.0);
        let valid = Array2::from_elem((2, 2), true);
        let a = align_depth(&pred, &reference, &valid).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12 && (a.shift - 1.0).abs() < 1e-12);
        assert!(a.aligned.iter().zip(reference.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn identity_alignment() {
        let pred = array![[0.5, 1.5, 2.5]];
        let a = align_depth(&pred, &pred, &Array2::from_elem((1, 3), true)).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12 && a.shift.abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_ignored() {
        let pred = array![[1.0, 2.0, 3.0]];
        let reference = array![[3.0, 5.0, 1000.0]];
        let valid = array![[true, true, false]];
        let a = align_depth(&pred, &reference, &valid).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12 && (a.shift - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_rejected() {
        let pred = array![[2.0, 2.0, 2.0]];
        let reference = array![[1.0, 2.0, 3.0]];
        let valid = Array2::from_elem((1, 3), true);
        assert!(matches!(align_depth(&pred, &reference, &valid), Err(Error::RankDeficient(_))));
        let one = array![[true, false, false]];
        assert!(align_depth(&array![[1.0, 2.0, 3.0]], &reference, &one).is_err());
    }
}
