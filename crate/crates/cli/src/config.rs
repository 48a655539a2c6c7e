//! The optional TOML configuration file and its merge with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hlfp_core::arch::file;
use hlfp_core::{build_variant, validate, HlfpError, ModelSpec, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::args::{ArchArgs, BenchModeArg, Format, TrainOverrides};
use crate::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
    pub output: OutputSection,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Option<PathBuf>,
    pub variant: Option<String>,
    pub classes: Option<usize>,
    pub superclass_map: Option<Vec<usize>>,
    pub width_divisor: Option<usize>,
    pub input_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub mode: Option<BenchModeArg>,
    pub workers: Option<usize>,
    pub warmup: Option<usize>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub format: Option<Format>,
}

/// A configuration file that fails to parse is a validation failure.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

/// The model flags after the configuration file fills the gaps.
pub fn resolve_model_section(flags: &ArchArgs, file: &ModelSection) -> ModelSection {
    let from_flags = flags.arch.is_some() || flags.variant.is_some();
    ModelSection {
        arch: flags.arch.clone().or(if from_flags { None } else { file.arch.clone() }),
        variant: flags
            .variant
            .map(|v| v.to_string())
            .or(if from_flags { None } else { file.variant.clone() }),
        classes: flags.classes.or(file.classes),
        superclass_map: flags.superclass_map.clone().or(file.superclass_map.clone()),
        width_divisor: flags.width_divisor.or(file.width_divisor),
        input_size: flags.input_size.or(file.input_size),
    }
}

/// Builds and validates the model described by the flags and the file.
pub fn build_model(section: &ModelSection) -> anyhow::Result<ModelSpec> {
    let mut model = match (&section.arch, &section.variant) {
        (Some(path), _) => file::read(path)?,
        (None, Some(v)) => {
            let variant: Variant = v.parse()?;
            let k = section
                .classes
                .ok_or_else(|| UsageError("--classes is required with --variant".into()))?;
            build_variant(variant, k, section.superclass_map.as_deref())?
        }
        (None, None) => return Err(UsageError("give --arch FILE or --variant with --classes".into()).into()),
    };
    if let Some(d) = section.width_divisor {
        model = model.with_width_divisor(d)?;
    }
    if let Some(s) = section.input_size {
        model = model.with_input_size(s, s);
    }
    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(HlfpError::Validation(violations.iter().map(|v| v.to_string()).collect()).into());
    }
    Ok(model)
}

pub fn train_config(file: &TrainConfig, flags: &TrainOverrides) -> TrainConfig {
    let mut c = file.clone();
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = flags.schedule {
        c.schedule = v.into();
    }
    if let Some(v) = flags.momentum {
        c.momentum = v;
    }
    if let Some(v) = flags.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if let Some(v) = flags.augmentation {
        c.augmentation = v.into();
    }
    c
}
