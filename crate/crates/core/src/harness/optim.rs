use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LayerId;
use crate::model::MultitaskModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate multiplier applied every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.5,
            lr_decay_every: 1000,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.lr_decay_every > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Step-decayed learning rate at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay.powi((t / self.lr_decay_every) as i32)
    }
}

/// Adam over every parameter tensor of a model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    first: BTreeMap<LayerId, Vec<f64>>,
    second: BTreeMap<LayerId, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &MultitaskModel) -> Result<Self> {
        config.validate()?;
        let mut first = BTreeMap::new();
        for id in model.param_ids() {
            first.insert(id.clone(), vec![0.0; model.param(&id)?.len()]);
        }
        Ok(Adam {
            config,
            step: 0,
            second: first.clone(),
            first,
        })
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, model: &mut MultitaskModel, grads: &BTreeMap<LayerId, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (id, g) in grads {
            let m = self
                .first
                .get_mut(id)
                .ok_or_else(|| Error::Layout(format!("optimizer has no state for {id}")))?;
            let v = self.second.get_mut(id).expect("paired moment buffers");
            let w = model.param_mut(id)?.data_mut();
            if g.len() != w.len() {
                return Err(Error::Layout(format!("gradient length mismatch for {id}")));
            }
            for j in 0..w.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Clears both moments at the given positions of one tensor.
    pub fn reset(&mut self, id: &LayerId, positions: impl IntoIterator<Item = usize>) {
        if let (Some(m), Some(v)) = (self.first.get_mut(id), self.second.get_mut(id)) {
            for j in positions {
                m[j] = 0.0;
                v[j] = 0.0;
            }
        }
    }

    pub fn moments(&self, id: &LayerId) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(id)?, self.second.get(id)?))
    }
}
