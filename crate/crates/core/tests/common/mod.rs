#![allow(dead_code)]

pub mod oracle;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

pub fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

pub fn host64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error between the analytic gradient of `f` at `x0` and central
/// finite differences, measured as `||g - fd|| / max(||g||, ||fd||)`.
pub fn fd_rel_error(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&t64(x0, shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let g = host64(grads.get(var.as_tensor()).expect("gradient"));
    let eps = 1e-6;
    let mut fd = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += eps;
        let lp = host64(&f(&t64(&p, shape)))[0];
        p[i] -= 2.0 * eps;
        let lm = host64(&f(&t64(&p, shape)))[0];
        fd.push((lp - lm) / (2.0 * eps));
    }
    let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
    num / den
}

/// Scalar projection `sum(out * r)` with fixed random `r`, for gradient checks.
pub fn project(out: &Tensor, seed: u64) -> Tensor {
    let n = out.elem_count();
    let r = t64(&randn(&mut rng(seed), n, 1.0), out.dims());
    (out.to_dtype(DType::F64).unwrap() * r).unwrap().sum_all().unwrap()
}
