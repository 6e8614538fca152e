//! AdamW with decoupled weight decay.
//!
//! ```text
//! w ← w − lr·wd·w                      (decay, only for `decay` params)
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! w ← w − lr · m̂ / (√v̂ + ε)            m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ)
//! ```
//!
//! Masked entries are forced back to exactly zero after every update and
//! their moments are cleared.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        AdamWConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let m: Vec<Vec<f32>> = params
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        AdamWState {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter that requires grad.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer state tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        // Validate everything before mutating anything.
        for (id, p) in params.iter() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let g = grads.param(params, id).ok_or_else(|| Error::MissingGrad {
                name: p.name.clone(),
            })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    name: p.name.clone(),
                });
            }
        }
        let gathered: Vec<Option<Vec<f32>>> = params
            .iter()
            .map(|(id, p)| {
                p.tensor
                    .requires_grad()
                    .then(|| grads.param(params, id).map(|g| g.to_vec()))
                    .flatten()
            })
            .collect();

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);

        for ((id, p), g) in params.iter_mut().zip(gathered) {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let decay = if p.decay { c.learning_rate * c.weight_decay } else { 0.0 };
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                w[i] -= decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
            if let Some(mask) = &p.mask {
                for (i, keep) in mask.iter().enumerate() {
                    if !keep {
                        w[i] = 0.0;
                        m[i] = 0.0;
                        v[i] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}
