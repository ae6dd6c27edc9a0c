use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { config, step_count: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Non-finite gradients leave parameters and state
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.tensors.len() != store.len() {
            return Err(Error::Shape(format!("{} gradient tensors for {} parameters", grads.tensors.len(), store.len())));
        }
        for ((name, p), g) in store.iter().zip(&grads.tensors) {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("gradient for {name} has length {}, expected {}", g.len(), p.len())));
            }
            if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] = {}", g.data[i])));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, p) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k].data, &mut self.v[k].data, &grads.tensors[k].data);
            for i in 0..p.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
