//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParameterStore};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_CLIP: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before any [`Adam::update`] calls for that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates every parameter of `store` that has a gradient, with the
    /// learning rate multiplied by `lr_scale`.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &ParamGrads, lr_scale: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("Adam::update called before begin_step".into()));
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        for (name, value) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((p, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
