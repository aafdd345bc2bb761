use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FitResult, LmModel};
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub loglik: f64,
    pub free_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub start_id: usize,
    pub n_subjects: usize,
}

/// Self-describing JSON document holding a model and its fit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub model: LmModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

impl From<&FitResult> for ModelDocument {
    fn from(fit: &FitResult) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: fit.model.clone(),
            fit: Some(FitSummary {
                loglik: fit.loglik,
                free_params: fit.free_params,
                aic: fit.aic,
                bic: fit.bic,
                n_iterations: fit.n_iterations,
                converged: fit.converged,
                start_id: fit.start_id,
                n_subjects: fit.n_subjects,
            }),
        }
    }
}

pub fn write_model(path: &Path, doc: &ModelDocument) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(MODEL_FORMAT_VERSION as u64) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported model format version {version:?}, expected {MODEL_FORMAT_VERSION}"),
        });
    }
    let doc: ModelDocument = serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    doc.model.validate()?;
    Ok(doc)
}
