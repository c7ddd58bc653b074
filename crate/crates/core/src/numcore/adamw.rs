//! AdamW with decoupled weight decay.
//!
//! Per parameter `w` with gradient `g`, at step `t` (1-based):
//!
//! ```text
//! w ← w · (1 − lr · decay)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! w ← w − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.epsilon <= 1e-4;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid AdamW settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    config: AdamWConfig,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every tensor in `params`.
    ///
    /// Every parameter needs a gradient of the same shape; nothing is updated
    /// if any is missing or mismatched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamWConfig {
            learning_rate: lr,
            weight_decay,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *w *= decay;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
