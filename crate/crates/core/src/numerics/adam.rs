use std::collections::BTreeMap;

use crate::error::{dim_err, Result};

use super::graph::{Gradients, ParamGrad};
use super::params::ParamStore;

/// Adam optimizer state: per-parameter moment accumulators and the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every trainable parameter in `params`.
///
/// Parameters without an entry in `grads` see a zero gradient, so their
/// moments still decay. Frozen tensors (`requires_grad == false`) are skipped.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(ParamGrad::Dense(d)) = grads.param(name) {
            if d.len() != t.numel() {
                return Err(dim_err(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    d.len(),
                    t.numel()
                )));
            }
        }
    }

    state.step += 1;
    let t_step = state.step as f64;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let bc1 = 1.0 - b1.powf(t_step);
    let bc2 = 1.0 - b2.powf(t_step);

    for (name, tensor) in params.iter_mut() {
        if !tensor.requires_grad {
            continue;
        }
        let n = tensor.numel();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(dim_err(format!("moment shape mismatch for `{name}`")));
        }
        let g = grads.param_dense(name, n);
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
