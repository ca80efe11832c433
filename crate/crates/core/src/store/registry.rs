//! A directory holding one backbone checkpoint, adapter files, and `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::Budget;
use crate::error::{Error, Result, StoreError};
use crate::model::{Backbone, ComposedModel, DomainAdapter};
use crate::store::adapter_file::{decode_adapter, encode_adapter};
use crate::store::backbone_file::{encode_backbone, load_backbone};
use crate::store::codec::{read_file, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BACKBONE_FILE: &str = "backbone.ba2b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub budget: Budget,
    /// Relative to the registry root.
    pub path: String,
    pub sha256: String,
    pub seed: u64,
    pub config_hash: String,
    /// Whether the stored switches satisfy the budget in every constraint scope.
    pub compliant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone: String,
    pub backbone_sha256: String,
    pub architecture_hash: String,
    pub entries: Vec<ManifestEntry>,
    /// Cached doubled fine-tuning errors per domain.
    #[serde(default)]
    pub baseline_errors: BTreeMap<String, f64>,
}

/// Training metadata recorded alongside an adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMeta {
    pub seed: u64,
    pub config_hash: String,
    pub compliant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub domain: String,
    pub budget: Budget,
    /// `None` when the file hashes and decodes cleanly.
    pub problem: Option<String>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.problem.is_none()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Mutations take `&mut self`, so one handle never races itself; every file,
/// the manifest included, is replaced atomically.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    root: PathBuf,
    manifest: Manifest,
    backbone: Arc<Backbone<f32>>,
}

impl ModelRegistry {
    pub fn create(root: &Path, backbone: Backbone<f32>) -> Result<Self> {
        std::fs::create_dir_all(root.join("adapters")).map_err(|e| StoreError::io(root, e))?;
        let bytes = encode_backbone(&backbone)?;
        write_atomic(&root.join(BACKBONE_FILE), &bytes)?;
        let manifest = Manifest {
            backbone: BACKBONE_FILE.to_string(),
            backbone_sha256: sha256_hex(&bytes),
            architecture_hash: backbone.arch().hash_hex(),
            entries: Vec::new(),
            baseline_errors: BTreeMap::new(),
        };
        let reg = ModelRegistry { root: root.to_path_buf(), manifest, backbone: Arc::new(backbone) };
        reg.write_manifest()?;
        Ok(reg)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&read_file(&root.join(MANIFEST_FILE))?).map_err(StoreError::from)?;
        let backbone_path = root.join(&manifest.backbone);
        if sha256_hex(&read_file(&backbone_path)?) != manifest.backbone_sha256 {
            return Err(StoreError::ContentHash(backbone_path).into());
        }
        let backbone: Backbone<f32> = load_backbone(&backbone_path)?;
        if backbone.arch().hash_hex() != manifest.architecture_hash {
            return Err(StoreError::ArchitectureHash {
                file: manifest.architecture_hash.clone(),
                backbone: backbone.arch().hash_hex(),
            }
            .into());
        }
        Ok(ModelRegistry { root: root.to_path_buf(), manifest, backbone: Arc::new(backbone) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn backbone(&self) -> &Arc<Backbone<f32>> {
        &self.backbone
    }

    pub fn list(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(StoreError::from)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    /// Stores the adapter, replacing any earlier entry for the same (domain, budget).
    pub fn register(&mut self, adapter: &DomainAdapter<f32>, meta: EntryMeta) -> Result<&ManifestEntry> {
        let bytes = encode_adapter(adapter, self.backbone.arch())?;
        let rel = format!("adapters/{}_b{}.ba2a", file_stem(&adapter.domain), adapter.budget);
        write_atomic(&self.root.join(&rel), &bytes)?;
        let entry = ManifestEntry {
            domain: adapter.domain.clone(),
            budget: adapter.budget,
            path: rel,
            sha256: sha256_hex(&bytes),
            seed: meta.seed,
            config_hash: meta.config_hash,
            compliant: meta.compliant,
        };
        let entries = &mut self.manifest.entries;
        let idx = match entries.iter().position(|e| e.domain == entry.domain && e.budget == entry.budget) {
            Some(i) => {
                entries[i] = entry;
                i
            }
            None => {
                entries.push(entry);
                entries.len() - 1
            }
        };
        self.write_manifest()?;
        Ok(&self.manifest.entries[idx])
    }

    pub fn set_baseline_error(&mut self, domain: &str, e_max: f64) -> Result<()> {
        self.manifest.baseline_errors.insert(domain.to_string(), e_max);
        self.write_manifest()
    }

    pub fn entry(&self, domain: &str, budget: Budget) -> Result<&ManifestEntry> {
        let entries = &self.manifest.entries;
        if !entries.iter().any(|e| e.domain == domain) {
            let mut known: Vec<String> = entries.iter().map(|e| e.domain.clone()).collect();
            known.dedup();
            return Err(StoreError::UnknownDomain(domain.to_string(), known).into());
        }
        entries.iter().find(|e| e.domain == domain && e.budget == budget).ok_or_else(|| {
            let available = entries.iter().filter(|e| e.domain == domain).map(|e| e.budget.to_string()).collect();
            Error::from(StoreError::UnknownBudget { domain: domain.to_string(), budget: budget.to_string(), available })
        })
    }

    /// Loads an adapter, checking its content hash against the manifest.
    pub fn load_adapter(&self, domain: &str, budget: Budget) -> Result<DomainAdapter<f32>> {
        let entry = self.entry(domain, budget)?;
        let path = self.root.join(&entry.path);
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(StoreError::ContentHash(path).into());
        }
        decode_adapter(&bytes, self.backbone.arch())
    }

    pub fn resolve(&self, domain: &str, budget: Budget) -> Result<ComposedModel<f32>> {
        ComposedModel::new(Arc::clone(&self.backbone), self.load_adapter(domain, budget)?)
    }

    /// Re-hashes and decodes every adapter; one outcome per manifest entry.
    pub fn verify(&self) -> Vec<VerifyOutcome> {
        self.manifest
            .entries
            .iter()
            .map(|e| VerifyOutcome {
                domain: e.domain.clone(),
                budget: e.budget,
                problem: self.load_adapter(&e.domain, e.budget).err().map(|err| err.to_string()),
            })
            .collect()
    }
}

fn file_stem(domain: &str) -> String {
    domain.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
