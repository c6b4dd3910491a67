//! AdamW with decoupled weight decay.
//!
//! Decay is applied directly to the weights, never through the gradient
//! path, so `grads = 0, weight_decay = λ` scales every trainable weight by
//! `(1 − lr·λ)` exactly. Moments are bias-corrected. Optimizer steps are
//! strictly single-threaded.

use indexmap::IndexMap;

use crate::error::{Result, VoltError};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    pub fn moment_entries(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((name, m), v)| (name.as_str(), m, v))
    }

    pub(crate) fn restore_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}

/// One AdamW update over all trainable entries of `params`.
pub fn adamw_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamWState) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let c = state.config;
    let bias1 = 1.0 - c.beta1.powi(t as i32);
    let bias2 = 1.0 - c.beta2.powi(t as i32);
    let decay = 1.0 - c.lr * c.weight_decay;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();

    for name in &names {
        let entry = params.get_mut(name)?;
        let grad = grads
            .get(name)
            .ok_or_else(|| VoltError::shape(format!("missing gradient for parameter {name}")))?;
        if grad.shape() != entry.tensor.shape() {
            return Err(VoltError::shape(format!(
                "gradient shape {:?} does not match parameter {name} shape {:?}",
                grad.shape(),
                entry.tensor.shape()
            )));
        }

        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));

        let w = entry.tensor.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..w.len() {
            let g = grad.data()[i];
            md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
            vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            w[i] = w[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        entry.tensor.check_finite("adamw_step")?;
    }
    Ok(())
}
