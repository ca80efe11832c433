use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initial value of every real-valued switch; positive, so all channels start on.
pub const SWITCH_INIT: f64 = 0.001;

/// Threshold `τ`: 0 for `x ≤ 0`, 1 otherwise.
pub fn threshold<T: Scalar>(x: T) -> bool {
    x > T::zero()
}

pub fn binarize<T: Scalar>(relaxed: &[T]) -> Vec<bool> {
    relaxed.iter().map(|&x| threshold(x)).collect()
}

/// Real-valued switches of one convolution, one per input channel, with the
/// binarized gate cached alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchVector<T> {
    relaxed: Vec<T>,
    gate: Vec<bool>,
}

impl<T: Scalar> SwitchVector<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_relaxed(vec![T::of(SWITCH_INIT); channels])
    }

    pub fn from_relaxed(relaxed: Vec<T>) -> Self {
        let gate = binarize(&relaxed);
        SwitchVector { relaxed, gate }
    }

    /// Switches fixed to a binary pattern: on ↦ `SWITCH_INIT`, off ↦ `-SWITCH_INIT`.
    pub fn from_gate(gate: &[bool]) -> Self {
        let relaxed =
            gate.iter().map(|&on| if on { T::of(SWITCH_INIT) } else { T::of(-SWITCH_INIT) }).collect();
        Self::from_relaxed(relaxed)
    }

    pub fn len(&self) -> usize {
        self.relaxed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relaxed.is_empty()
    }

    pub fn relaxed(&self) -> &[T] {
        &self.relaxed
    }

    pub fn gate(&self) -> &[bool] {
        &self.gate
    }

    pub fn active(&self) -> usize {
        self.gate.iter().filter(|&&b| b).count()
    }

    /// Replaces the relaxed values and refreshes the cached gate.
    pub fn set_relaxed(&mut self, relaxed: Vec<T>) -> Result<()> {
        if relaxed.len() != self.relaxed.len() {
            return Err(Error::Shape(format!("{} switch values for {} channels", relaxed.len(), self.len())));
        }
        self.gate = binarize(&relaxed);
        self.relaxed = relaxed;
        Ok(())
    }

    /// Applies `f` to the relaxed values in place, then re-binarizes.
    pub fn update(&mut self, f: impl FnOnce(&mut [T])) {
        f(&mut self.relaxed);
        self.gate = binarize(&self.relaxed);
    }
}
