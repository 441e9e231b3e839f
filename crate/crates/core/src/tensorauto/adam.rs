use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelParams, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Bias-corrected Adam update in place. Parameters absent from `grads` are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(TensorError::InvalidHyper(format!("lr must be positive, got {}", cfg.lr)));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let [r, c] = p.shape();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        if m.shape() != [r, c] || v.shape() != [r, c] {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                left: [r, c],
                right: m.shape(),
            });
        }
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(r, c);
                &zero
            }
        };
        for (((pi, mi), vi), gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if !p.is_finite() {
            return Err(TensorError::NumericalFault { op: "adam" });
        }
    }
    Ok(())
}
