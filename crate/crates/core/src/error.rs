use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("node {0} is not recorded on this tape")]
    MissingNode(usize),

    #[error("loss node must hold a single value, found {0} elements")]
    NonScalarLoss(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no batch-norm entry for domain {domain:?} at budget {budget}")]
    MissingBnEntry { domain: String, budget: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("budget configuration: {0}")]
    Budget(String),

    #[error("layer {layer} has every switch off")]
    AllSwitchesOff { layer: usize },

    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Persistence failures. Each malformed-file condition has its own variant.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("architecture hash mismatch: file {file}, backbone {backbone}")]
    ArchitectureHash { file: String, backbone: String },

    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("{0} trailing bytes after end of record")]
    TrailingBytes(usize),

    #[error("switch byte length {found} does not match ceil({channels}/8) = {expected}")]
    SwitchLength { channels: usize, expected: usize, found: usize },

    #[error("nonzero padding bits in final switch byte {0:#04x}")]
    Padding(u8),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("unknown domain {0:?}; known domains: {1:?}")]
    UnknownDomain(String, Vec<String>),

    #[error("domain {domain:?} has no budget {budget}; available budgets: {available:?}")]
    UnknownBudget { domain: String, budget: String, available: Vec<String> },

    #[error("content hash mismatch for {0}")]
    ContentHash(PathBuf),

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
