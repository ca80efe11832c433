use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.001, momentum: 0.9, weight_decay: 0.0 }
    }
}

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
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Invalid(format!("bad SGD settings {self:?}")));
        }
        Ok(())
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Invalid(format!("bad Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum. State is kept per parameter slot.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg, velocity: Vec::new() }
    }

    /// `v ← μv + g + wd·p; p ← p − lr·scale·v`.
    pub fn step(&mut self, slot: usize, params: &mut [T], grads: &[T], lr_scale: f64) {
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != params.len() {
            *v = vec![T::zero(); params.len()];
        }
        let (mu, wd, lr) = (T::of(self.cfg.momentum), T::of(self.cfg.weight_decay), T::of(self.cfg.lr * lr_scale));
        for ((p, &g), vel) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
            *vel = mu * *vel + g + wd * *p;
            *p -= lr * *vel;
        }
    }
}

#[derive(Debug, Clone)]
struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    slots: Vec<Option<AdamSlot<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, slots: Vec::new() }
    }

    pub fn step(&mut self, slot: usize, params: &mut [T], grads: &[T], lr_scale: f64) {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, || None);
        }
        let st = self.slots[slot].get_or_insert_with(|| AdamSlot {
            m: vec![T::zero(); params.len()],
            v: vec![T::zero(); params.len()],
            t: 0,
        });
        st.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::of(1.0 - b1.powi(st.t));
        let c2 = T::of(1.0 - b2.powi(st.t));
        let (b1, b2, eps, lr) = (T::of(b1), T::of(b2), T::of(self.cfg.eps), T::of(self.cfg.lr * lr_scale));
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
            st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
            let m_hat = st.m[i] / c1;
            let v_hat = st.v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Step decay: the learning rate is multiplied by `factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("decay epochs must be strictly increasing".into()));
        }
        if !(self.factor > 0.0) {
            return Err(Error::Invalid("decay factor must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier applied to base learning rates during `epoch` (0-based).
    pub fn scale(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.factor.powi(decays as i32)
    }
}
