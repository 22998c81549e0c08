//! Run manifests: enough to replay a command and to identify its inputs
//! and outputs by content.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spvt::data::Dataset;

use crate::config::RunConfig;

/// Git-style blob hash (`blob <len>\0<bytes>`), SHA-256 as in git's
/// SHA-256 object format.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a train/test split: labels and pixel bits.
pub fn dataset_fingerprint(train: &Dataset, test: &Dataset) -> String {
    let mut bytes = Vec::new();
    for set in [train, test] {
        bytes.extend_from_slice(&(set.len() as u64).to_le_bytes());
        for &l in set.labels() {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for v in set.pixels() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob_hash(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub hash: String,
}

impl Artifact {
    pub fn new(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), hash: blob_hash(bytes) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Every config key after defaults were applied.
    pub config: BTreeMap<String, String>,
    /// The same configuration as config-file text.
    pub config_text: String,
    pub dataset_fingerprint: Option<String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: config.train.seed,
            config: config.resolved().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            config_text: config.to_text(),
            dataset_fingerprint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}
