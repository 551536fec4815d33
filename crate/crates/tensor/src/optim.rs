use std::collections::BTreeMap;
use std::sync::Arc;

use crate::backprop::Gradients;
use crate::error::{invalid, Result};
use crate::param::Param;
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with per-parameter step counts, so parameters added mid-training start with their
/// own bias correction.
pub struct Adam<T: Float> {
    config: AdamConfig,
    params: Vec<Arc<Param<T>>>,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: Vec<Arc<Param<T>>>) -> Self {
        let mut opt = Adam {
            config,
            params: Vec::new(),
            slots: BTreeMap::new(),
        };
        opt.add_params(params);
        opt
    }

    /// Registers parameters not already managed (matched by name).
    pub fn add_params(&mut self, params: Vec<Arc<Param<T>>>) {
        for p in params {
            if !self.params.iter().any(|q| q.name() == p.name()) {
                self.params.push(p);
            }
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn params(&self) -> &[Arc<Param<T>>] {
        &self.params
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot<T>> {
        &self.slots
    }

    pub fn set_slot(&mut self, name: &str, slot: AdamSlot<T>) -> Result<()> {
        let Some(p) = self.params.iter().find(|p| p.name() == name) else {
            return invalid("adam", format!("no managed parameter named {name}"));
        };
        if slot.m.len() != p.numel() || slot.v.len() != p.numel() {
            return invalid("adam", format!("moment length mismatch for {name}"));
        }
        self.slots.insert(name.to_string(), slot);
        Ok(())
    }

    /// Applies one update to every trainable managed parameter that has a gradient.
    pub fn step(&mut self, grads: &Gradients<T>) -> Result<usize> {
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        let mut updated = 0;
        for p in &self.params {
            if !p.is_trainable() {
                continue;
            }
            let Some(g) = grads.get(p.id()) else {
                continue;
            };
            let slot = self.slots.entry(p.name().to_string()).or_insert_with(|| AdamSlot {
                step: 0,
                m: vec![T::zero(); p.numel()],
                v: vec![T::zero(); p.numel()],
            });
            slot.step += 1;
            let bc1 = T::lit(1.0 - c.beta1.powi(slot.step as i32));
            let bc2 = T::lit(1.0 - c.beta2.powi(slot.step as i32));
            let lr = T::lit(c.lr);
            let mut data = p.data().as_ref().clone();
            for i in 0..data.len() {
                let gi = g[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * gi;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.set_data(data)?;
            updated += 1;
        }
        Ok(updated)
    }
}
