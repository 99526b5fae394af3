//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ndcompute::{lit, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), vec![T::zero(); t.numel()]))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update using the gradients stored on `params`:
/// `w ← w − lr·wd·w`, then the bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    hp: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2): (T, T) = (lit(hp.beta1), lit(hp.beta2));
    let (c1, c2): (T, T) = (lit(1.0 - hp.beta1.powi(t)), lit(1.0 - hp.beta2.powi(t)));
    let (lr_t, eps): (T, T) = (lit(lr), lit(hp.eps));
    let decay: T = lit(1.0 - lr * weight_decay);
    for (name, tensor) in params.iter_mut() {
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?
            .to_vec();
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::contract(format!("no optimizer state for `{name}`")));
        };
        if m.len() != grad.len() || v.len() != grad.len() {
            return Err(Error::contract(format!("optimizer state for `{name}` has the wrong size")));
        }
        for (((w, g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * *g;
            *vi = b2 * *vi + (T::one() - b2) * *g * *g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate for update number `step` (1-based) out of `total`:
/// linear warmup to `lr0` at `step = warmup`, then cosine annealing to
/// `lr_min` at `step = total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64, warmup: usize) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}
