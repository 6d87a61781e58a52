use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
    /// Simulation time of a divergence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl ErrorInfo {
    pub fn from_core(e: &claeo_core::error::Error) -> Self {
        use claeo_core::error::Error;
        let (kind, t) = match e {
            Error::Divergence { t, .. } => ("divergence", Some(*t)),
            Error::Config(_) => ("config", None),
            Error::Dimension(_) => ("dimension", None),
            Error::InvalidInput(_) => ("invalid_input", None),
        };
        Self { kind: kind.into(), message: e.to_string(), t }
    }
}

/// Record of one scenario run. `config` is the full resolved config text;
/// running it again reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config: String,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub error: Option<ErrorInfo>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Format { what: "manifest", message: e.to_string() })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}
