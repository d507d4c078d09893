use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{OptimState, ParamStore};
use crate::tensor::DenseArray;

/// AdamW moment hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update of every parameter named in `grads`.
///
/// Weight decay is decoupled and applied first, `p <- p - lr*wd*p`, then
/// the bias-corrected moment step `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Bias correction uses the number of updates each parameter has received,
/// so parameters that only appear in some batches are not penalized.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, DenseArray>,
    state: &mut OptimState,
    lr: f64,
    wd: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        let entry = params.entry(name)?;
        if !entry.trainable {
            return Err(Error::invalid(format!("gradient supplied for frozen parameter {name}")));
        }
        if entry.value.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), entry.value.shape())));
        }
        for (kind, map) in [("first", &state.m), ("second", &state.v)] {
            if let Some(s) = map.get(name) {
                if s.shape() != g.shape() {
                    return Err(Error::shape(format!("{kind} moment of {name} has shape {:?}, parameter {:?}", s.shape(), g.shape())));
                }
            }
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = *hyper;
    for (name, g) in grads {
        let count = state.counts.entry(name.clone()).or_insert(0);
        *count += 1;
        let t = *count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = state.m.entry(name.clone()).or_insert_with(|| DenseArray::zeros(g.shape())).data_mut();
        let v = state.v.entry(name.clone()).or_insert_with(|| DenseArray::zeros(g.shape())).data_mut();
        let p = params.value_mut(name)?.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            p[i] -= lr * wd * p[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Global 2-norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, DenseArray>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, DenseArray>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
