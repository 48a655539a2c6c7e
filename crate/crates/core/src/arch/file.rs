//! Architecture description files.
//!
//! The format is TOML: top-level keys for the model header, a `[stem]` table,
//! `[[trunk_stages]]` / `[[branch_stages]]` arrays and an optional
//! `[superclass]` table. [`to_text`] is canonical: the same spec always
//! produces the same bytes.

use std::path::Path;

use super::ModelSpec;
use crate::error::{HlfpError, Result};

const HEADER: &str = "# hlfp architecture description v1\n";

pub fn to_text(model: &ModelSpec) -> Result<String> {
    let body = toml::to_string(model).map_err(|e| HlfpError::ArchFile(e.to_string()))?;
    Ok(format!("{HEADER}{body}"))
}

pub fn from_text(text: &str) -> Result<ModelSpec> {
    toml::from_str(text).map_err(|e| HlfpError::ArchFile(e.to_string()))
}

pub fn write(path: &Path, model: &ModelSpec) -> Result<()> {
    std::fs::write(path, to_text(model)?).map_err(|e| HlfpError::io(path, e))
}

pub fn read(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| HlfpError::io(path, e))?;
    from_text(&text)
}
