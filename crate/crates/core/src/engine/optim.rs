//! Adam with bias correction over an explicit list of variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = m.clone();
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, slots, t: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// One update from `grads`; variables without a gradient keep their moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            // Leaf gradients still reference the forward graph; keeping them
            // in the moments would chain every step's activations together.
            let g = g.detach();
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&slot.m * (1.0 / c1))?;
            let v_hat = (&slot.v * (1.0 / c2))?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let next = (slot.var.as_tensor() - (update * self.cfg.lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per variable.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.m, &s.v))
    }

    pub fn restore(&mut self, t: u64, moments: &[(String, Tensor, Tensor)]) -> Result<()> {
        if moments.len() != self.slots.len() {
            return Err(Error::Shape(format!("{} moment pairs for {} variables", moments.len(), self.slots.len())));
        }
        for (slot, (name, m, v)) in self.slots.iter_mut().zip(moments) {
            if &slot.name != name || m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::Shape(format!("optimizer state for `{name}` does not match `{}`", slot.name)));
            }
            slot.m = m.to_dtype(slot.var.dtype())?;
            slot.v = v.to_dtype(slot.var.dtype())?;
        }
        self.t = t;
        Ok(())
    }
}
