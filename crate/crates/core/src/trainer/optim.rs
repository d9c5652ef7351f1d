use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::fusion::Checkpoint;
use crate::nn::{to_host, ParamStore};
use crate::{Error, Result};

/// Global 2-norm over a set of gradient tensors.
pub fn global_norm(grads: &[&Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for g in grads {
        s += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
    }
    Ok(s.sqrt())
}

/// Factor that brings a gradient of global norm `norm` down to `max_norm`
/// (1 when it is already within bounds).
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip: f64,
    pub updated: usize,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Updates every parameter for which `lr_of` returns `Some(lr)`. The
    /// gradient is first clipped to global norm `clip_norm` over those
    /// parameters.
    pub fn step(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        clip_norm: f64,
        lr_of: impl Fn(&str) -> Option<f64>,
    ) -> Result<StepInfo> {
        let mut live = Vec::new();
        for (name, var) in params.iter() {
            if let (Some(lr), Some(g)) = (lr_of(name), grads.get(var.as_tensor())) {
                live.push((name.clone(), var, lr, g));
            }
        }
        let norm = global_norm(&live.iter().map(|l| l.3).collect::<Vec<_>>())?;
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clip = clip_factor(norm, clip_norm);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, lr, g) in &live {
            let g = (*g * clip)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let next = ((p * (1.0 - lr * self.weight_decay))? - (update * *lr)?)?;
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(StepInfo { grad_norm: norm, clip, updated: live.len() })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            meta: serde_json::json!({
                "t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay,
            }),
            ..Default::default()
        };
        for (prefix, map) in [("m.", &self.m), ("v.", &self.v)] {
            for (name, t) in map {
                ck.tensors.insert(format!("{prefix}{name}"), (t.dims().to_vec(), to_host(t)?));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: candle_core::DType) -> Result<Self> {
        let meta = &ck.meta;
        let get = |k: &str| meta[k].as_f64().ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {k}")));
        let mut opt = Self::new(get("weight_decay")?);
        opt.beta1 = get("beta1")?;
        opt.beta2 = get("beta2")?;
        opt.eps = get("eps")?;
        opt.t = get("t")? as usize;
        for (key, (shape, data)) in &ck.tensors {
            let t = crate::nn::host(data.clone(), shape, dtype)?;
            if let Some(n) = key.strip_prefix("m.") {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix("v.") {
                opt.v.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {key}")));
            }
        }
        Ok(opt)
    }
}
