//! Run manifests: everything needed to repeat a run, plus hashes of what it produced.

use std::path::Path;

use anyhow::Context;
use hlfp_core::arch::file;
use hlfp_core::tensor::checkpoint;
use hlfp_core::{Logits, ModelSpec};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub variant: String,
    pub num_classes: usize,
    pub active_classes: Vec<usize>,
    pub input_shape: [usize; 3],
    pub arch_sha256: String,
}

impl ModelInfo {
    pub fn of(model: &ModelSpec) -> anyhow::Result<Self> {
        Ok(ModelInfo {
            name: model.name.clone(),
            variant: model.variant.to_string(),
            num_classes: model.num_classes,
            active_classes: model.active_classes.clone(),
            input_shape: model.input_shape,
            arch_sha256: sha256_hex(file::to_text(model)?.as_bytes()),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub checkpoint_format: u32,
    pub subcommand: &'static str,
    /// Resolved flags and configuration.
    pub config: Value,
    pub seed: Option<u64>,
    pub model: ModelInfo,
    pub data: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub logits_sha256: Option<String>,
    pub results: Value,
}

impl Manifest {
    pub fn new(subcommand: &'static str, model: &ModelSpec, config: Value) -> anyhow::Result<Self> {
        Ok(Manifest {
            tool: "hlfp",
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: checkpoint::VERSION,
            subcommand,
            config,
            seed: None,
            model: ModelInfo::of(model)?,
            data: None,
            checkpoint_sha256: None,
            logits_sha256: None,
            results: Value::Null,
        })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the class order and the little-endian bytes of every logit.
pub fn logits_sha256(logits: &Logits) -> String {
    let mut h = Sha256::new();
    for c in &logits.classes {
        h.update((*c as u64).to_le_bytes());
    }
    for v in logits.values.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
