//! Declarative benchmark configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ba2::budget::DEFAULT_LAMBDA_LR;
use ba2::{Architecture, Budget, ConstraintMode, ResNetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub seed: u64,
    pub arch: ResNetConfig,
    /// Backbone pretraining on the first domain; defaults to `train`.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    /// Adapters and the fine-tuned reference models.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    #[serde(default)]
    pub mode: ConstraintMode,
    #[serde(default = "default_lambda_lr")]
    pub lambda_lr: f64,
    /// The first domain pretrains the backbone and is served by it unchanged.
    pub domains: Vec<DatasetSpec>,
    /// Base for relative dataset paths; the config file's directory when loaded from disk.
    #[serde(default)]
    pub data_dir: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_budgets() -> Vec<f64> {
    vec![1.0, 0.75, 0.5, 0.25]
}

fn default_lambda_lr() -> f64 {
    DEFAULT_LAMBDA_LR
}

fn default_output() -> PathBuf {
    PathBuf::from("ba2-out")
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    /// Reads a config file; relative `data_dir` and `output` resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        Architecture::new(self.arch.clone()).map_err(|e| BenchError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if let Some(p) = &self.pretrain {
            p.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        }
        if self.domains.len() < 2 {
            return bad(format!("need a pretraining domain and at least one more, got {}", self.domains.len()));
        }
        let names: BTreeSet<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.domains.len() {
            return bad("domain names must be unique".into());
        }
        self.budget_list()?;
        if !(self.lambda_lr > 0.0) {
            return bad(format!("lambda_lr must be positive, got {}", self.lambda_lr));
        }
        Ok(())
    }

    /// Budgets as validated, distinct values in the given order.
    pub fn budget_list(&self) -> Result<Vec<Budget>, BenchError> {
        if self.budgets.is_empty() {
            return Err(BenchError::Config("no budgets given".into()));
        }
        let mut out: Vec<Budget> = Vec::new();
        for &b in &self.budgets {
            if !(b > 0.0 && b <= 1.0) {
                return Err(BenchError::Config(format!("budget {b} outside (0, 1]")));
            }
            let budget = Budget::new(b).map_err(|e| BenchError::Config(e.to_string()))?;
            if out.contains(&budget) {
                return Err(BenchError::Config(format!("duplicate budget {b}")));
            }
            out.push(budget);
        }
        Ok(out)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let mut cfg = self.pretrain.clone().unwrap_or_else(|| self.train.clone());
        cfg.seed = self.seed;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn architecture(&self) -> Result<Architecture, BenchError> {
        Architecture::new(self.arch.clone()).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn domain(&self, name: &str) -> Result<(usize, &DatasetSpec), BenchError> {
        self.domains.iter().enumerate().find(|(_, d)| d.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
            BenchError::Config(format!("unknown domain {name:?}; configured: {known:?}"))
        })
    }
}

/// Parses `a,b,c` or an inclusive range `lo..hi` (step 0.1) or `lo..hi:step`.
pub fn parse_budgets(text: &str) -> Result<Vec<f64>, BenchError> {
    let bad = || BenchError::Config(format!("cannot parse budgets {text:?}"));
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((h, s)) => (h, s.trim().parse::<f64>().map_err(|_| bad())?),
            None => (rest, 0.1),
        };
        let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // rounded to 6 places so 0.1-steps print cleanly
        return Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e6).round() / 1e6).collect());
    }
    text.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect()
}
