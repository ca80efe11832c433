use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::scoring::ScoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_COMPLIANCE: i32 = 5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ba2::Error),
    #[error("score: {0}")]
    Score(#[from] ScoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// The flag stored at training time disagrees with the switches on disk.
    #[error("compliance flag for {domain} at budget {budget} is {stored} but the stored switches give {recomputed}")]
    ComplianceMismatch { domain: String, budget: String, stored: bool, recomputed: bool },
    #[error("{domain} at budget {budget} violates its constraint: theta_bar {theta_bar:?}")]
    NonCompliant { domain: String, budget: String, theta_bar: Vec<f64> },
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => EXIT_CONFIG,
            BenchError::Data(_) | BenchError::Io { .. } => EXIT_DATA,
            BenchError::Model(ba2::Error::Store(_)) => EXIT_DATA,
            BenchError::Model(ba2::Error::Budget(_)) => EXIT_CONFIG,
            BenchError::Model(_) => EXIT_INTERNAL,
            BenchError::Score(_) => EXIT_DATA,
            BenchError::ComplianceMismatch { .. } | BenchError::NonCompliant { .. } => EXIT_COMPLIANCE,
        }
    }
}
