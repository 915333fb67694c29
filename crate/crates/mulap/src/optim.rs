//! Adam optimizer with decoupled weight decay.
//!
//! Moments are keyed by parameter name so optimizer state survives a
//! checkpoint round trip regardless of tensor identity. Weight decay is
//! applied directly to the parameter (AdamW style), never folded into the
//! moment estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// The optimizer. One instance drives one parameter set.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    state: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, state: BTreeMap::new() }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients accumulated on `params`.
    /// Parameters without a gradient this step are left untouched.
    /// Gradients are consumed (reset to empty) after the update.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<(), TensorError> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = p.grad_vec() else { continue };
            let slot = self
                .state
                .entry(name.clone())
                .or_insert_with(|| AdamSlot { m: vec![0.0; p.len()], v: vec![0.0; p.len()] });
            let mut data = p.data_mut();
            for i in 0..g.len() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -=
                    self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * data[i]);
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }

    /// Optimizer state for checkpointing, in deterministic name order.
    pub fn export_state(&self) -> (u64, &BTreeMap<String, AdamSlot>) {
        (self.t, &self.state)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn import_state(&mut self, t: u64, state: BTreeMap<String, AdamSlot>) {
        self.t = t;
        self.state = state;
    }
}

/// Clear accumulated gradients on every parameter.
pub fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}
