//! Budget constraints on the mean of binarized switches and their KKT multipliers.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Budget `β ∈ [0, 1]` on the fraction of active switches. Stored as `f32`,
/// which is also its on-disk width; equality and ordering are exact on the
/// stored value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Budget(f32);

impl Budget {
    pub const FULL: Budget = Budget(1.0);

    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Budget(format!("budget {beta} outside [0, 1]")));
        }
        Ok(Budget(beta as f32))
    }

    pub fn from_f32(beta: f32) -> Result<Self> {
        Self::new(f64::from(beta))
    }

    pub fn value(self) -> f64 {
        f64::from(self.0)
    }

    pub fn as_f32(self) -> f32 {
        self.0
    }
}

impl TryFrom<f64> for Budget {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Budget::new(v)
    }
}

impl From<Budget> for f64 {
    fn from(b: Budget) -> f64 {
        b.value()
    }
}

impl PartialEq for Budget {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}
impl Eq for Budget {}

impl Hash for Budget {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl PartialOrd for Budget {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Budget {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// One constraint on the mean over all switches of the adapter.
    Global,
    /// One constraint and one multiplier per conv layer.
    #[default]
    PerLayer,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ConstraintMode::Global),
            "per-layer" | "per_layer" => Ok(ConstraintMode::PerLayer),
            other => Err(Error::Budget(format!("unknown constraint mode {other:?}"))),
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintMode::Global => "global",
            ConstraintMode::PerLayer => "per-layer",
        })
    }
}

pub const DEFAULT_LAMBDA_LR: f64 = 0.01;

/// Target budget, constraint scope, and the multiplier state.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSpec {
    pub beta: Budget,
    pub mode: ConstraintMode,
    lambdas: Vec<f64>,
    pub lambda_lr: f64,
}

impl BudgetSpec {
    /// Multipliers start at zero: one for global mode, one per layer otherwise.
    pub fn new(beta: Budget, mode: ConstraintMode, layers: usize, lambda_lr: f64) -> Result<Self> {
        if !(lambda_lr > 0.0 && lambda_lr.is_finite()) {
            return Err(Error::Budget(format!("multiplier learning rate {lambda_lr} must be positive")));
        }
        let count = match mode {
            ConstraintMode::Global => 1,
            ConstraintMode::PerLayer => layers,
        };
        if count == 0 {
            return Err(Error::Budget("no layers to constrain".into()));
        }
        Ok(BudgetSpec { beta, mode, lambdas: vec![0.0; count], lambda_lr })
    }

    pub fn with_lambdas(mut self, lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.len() != self.lambdas.len() {
            return Err(Error::Budget(format!("{} multipliers for {} scopes", lambdas.len(), self.lambdas.len())));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Budget("multipliers must be nonnegative".into()));
        }
        self.lambdas = lambdas;
        Ok(self)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Mean of the binarized switches per constraint scope.
    pub fn theta_bar(&self, gates: &[&[bool]]) -> Vec<f64> {
        match self.mode {
            ConstraintMode::Global => {
                let total: usize = gates.iter().map(|g| g.len()).sum();
                let on: usize = gates.iter().map(|g| g.iter().filter(|&&b| b).count()).sum();
                vec![on as f64 / total.max(1) as f64]
            }
            ConstraintMode::PerLayer => gates.iter().map(|g| layer_mean(g)).collect(),
        }
    }

    /// Whether every scope satisfies `θ̄ ≤ β`.
    pub fn satisfied(&self, gates: &[&[bool]]) -> bool {
        self.theta_bar(gates).iter().all(|&t| t <= self.beta.value())
    }
}

fn layer_mean(gate: &[bool]) -> f64 {
    if gate.is_empty() {
        return 0.0;
    }
    gate.iter().filter(|&&b| b).count() as f64 / gate.len() as f64
}

/// Penalty `Σ λ·(θ̄ − β)` over the constraint scopes, and the per-scope violations `θ̄ − β`.
pub fn budget_penalty(gates: &[&[bool]], spec: &BudgetSpec) -> (f64, Vec<f64>) {
    let beta = spec.beta.value();
    let violations: Vec<f64> = spec.theta_bar(gates).into_iter().map(|t| t - beta).collect();
    let penalty = spec.lambdas.iter().zip(&violations).map(|(l, v)| l * v).sum();
    (penalty, violations)
}

/// Projected ascent on the multipliers: `λ ← max(0, λ + η·violation)`.
pub fn lambda_step(spec: &BudgetSpec, violations: &[f64]) -> BudgetSpec {
    let mut next = spec.clone();
    for (l, &v) in next.lambdas.iter_mut().zip(violations) {
        *l = (*l + spec.lambda_lr * v).max(0.0);
    }
    next
}
