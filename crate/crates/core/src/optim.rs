//! AdamW with decoupled weight decay and a linear warmup schedule.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::dim_err;
use crate::params::{GradientMap, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields, default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_max: 5e-5,
        }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            hyper,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`:
///
/// ```text
/// m ← β1·m + (1−β1)·g          m̂ = m / (1−β1^t)
/// v ← β2·v + (1−β2)·g²         v̂ = v / (1−β2^t)
/// θ ← θ − lr·(m̂ / (√v̂ + ε) + λ·θ)
/// ```
///

/// `base^exp` by binary exponentiation in a fixed multiplication order.
/// `powi` lowers to an intrinsic whose order is unspecified, so its result
/// can change with the optimization level.
fn pow_u64(base: f64, mut exp: u64) -> f64 {
    let (mut acc, mut sq) = (1.0, base);
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= sq;
        }
        sq *= sq;
        exp >>= 1;
    }
    acc
}
/// Gradients are checked for finiteness before anything is modified.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, grads: &GradientMap<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
    }
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(dim_err!(
            "optimizer covers {} parameters, gradients {}, store {}",
            state.m.len(),
            grads.len(),
            store.len()
        ));
    }
    for (id, name, p) in store.iter() {
        let g = grads
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(dim_err!(
                "gradient for {} has shape {:?}, parameter {:?}",
                name,
                g.shape(),
                p.shape()
            ));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    let h = state.hyper;
    state.t += 1;
    let t = state.t;
    let b1 = T::from_f64_lossy(h.beta1);
    let b2 = T::from_f64_lossy(h.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - pow_u64(h.beta1, t));
    let c2 = T::from_f64_lossy(1.0 - pow_u64(h.beta2, t));
    let eps = T::from_f64_lossy(h.eps);
    let wd = T::from_f64_lossy(h.weight_decay);
    let lr = T::from_f64_lossy(lr);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads.get(id).expect("checked above");
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let theta = store.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(())
}

/// Linear warmup to `lr_max` over `warmup` iterations, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: u64,
    pub max_iters: u64,
    pub lr_max: f64,
}

impl Schedule {
    /// Warmup over the first 10% of `max_iters`.
    pub fn with_default_warmup(max_iters: u64, lr_max: f64) -> Self {
        Self {
            warmup: max_iters / 10,
            max_iters,
            lr_max,
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup == 0 || t >= self.warmup {
            self.lr_max
        } else {
            self.lr_max * t as f64 / self.warmup as f64
        }
    }
}
