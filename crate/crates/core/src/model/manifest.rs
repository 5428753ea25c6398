use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fhir::Coding;
use crate::scaler::ScalerOverrides;

/// 2 GiB, the per-function container memory ceiling.
pub const MAX_MEMORY_BUDGET_BYTES: u64 = 2 * (1 << 30);
pub const DEFAULT_MEMORY_BUDGET_BYTES: u64 = 256 * (1 << 20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTaxonomy {
    /// Interpretable models that account for an outcome (e.g. decision trees).
    Explanatory,
    /// Models optimized for predictive power.
    Predictive,
    /// Representations of an environment an agent acts in.
    Environment,
    /// Models that classify a client's intent in a conversation.
    Interaction,
}

impl ModelTaxonomy {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTaxonomy::Explanatory => "explanatory",
            ModelTaxonomy::Predictive => "predictive",
            ModelTaxonomy::Environment => "environment",
            ModelTaxonomy::Interaction => "interaction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("function name {0:?} must match [a-z0-9-]+")]
    InvalidName(String),
    #[error("version {0:?} is not a semantic version")]
    InvalidVersion(String),
    #[error("memory budget of {requested} bytes exceeds the {MAX_MEMORY_BUDGET_BYTES} byte limit")]
    BudgetExceeded { requested: u64 },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub version: String,
    pub taxonomy: ModelTaxonomy,
    pub input_codes: BTreeSet<Coding>,
    pub output_codes: BTreeSet<Coding>,
    pub memory_budget_bytes: u64,
    pub description: String,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<(), ManifestError> {
        validate_name(&self.name)?;
        validate_version(&self.version)?;
        if self.memory_budget_bytes > MAX_MEMORY_BUDGET_BYTES {
            return Err(ManifestError::BudgetExceeded { requested: self.memory_budget_bytes });
        }
        Ok(())
    }

    pub fn author(&self) -> crate::fhir::Author {
        crate::fhir::Author::new(&self.name, &self.version)
    }
}

pub fn validate_name(name: &str) -> Result<(), ManifestError> {
    let ok = !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(ManifestError::InvalidName(name.to_owned()))
    }
}

pub fn validate_version(version: &str) -> Result<(), ManifestError> {
    semver::Version::parse(version)
        .map(|_| ())
        .map_err(|_| ManifestError::InvalidVersion(version.to_owned()))
}

/// Version selector for a pipeline stage: `name` tracks the active
/// version, `name@1.2.0` pins one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StageRef {
    pub function: String,
    pub version: Option<String>,
}

impl StageRef {
    pub fn latest(function: impl Into<String>) -> Self {
        StageRef { function: function.into(), version: None }
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let (function, version) = match text.split_once('@') {
            Some((f, "*")) => (f, None),
            Some((f, v)) => {
                validate_version(v)?;
                (f, Some(v.to_owned()))
            }
            None => (text, None),
        };
        validate_name(function)?;
        Ok(StageRef { function: function.to_owned(), version })
    }
}

impl fmt::Display for StageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            Some(v) => write!(f, "{}@{v}", self.function),
            None => f.write_str(&self.function),
        }
    }
}

impl Serialize for StageRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StageRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        StageRef::parse(&text).map_err(serde::de::Error::custom)
    }
}

fn default_budget() -> u64 {
    DEFAULT_MEMORY_BUDGET_BYTES
}

/// On-disk manifest: one JSON document per function or pipeline.
///
/// A function names a built-in `handler` (configured by `parameters`); a
/// pipeline lists its `pipeline` stages instead and derives its codes from
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<ModelTaxonomy>,
    #[serde(default)]
    pub input_codes: BTreeSet<Coding>,
    #[serde(default)]
    pub output_codes: BTreeSet<Coding>,
    #[serde(default = "default_budget")]
    pub memory_budget_bytes: u64,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handler: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub parameters: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<Vec<StageRef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalerOverrides>,
}

impl ManifestFile {
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        serde_json::from_str(text).map_err(|e| ManifestError::Invalid(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn is_pipeline(&self) -> bool {
        self.pipeline.is_some()
    }

    /// The function manifest for a handler-backed entry.
    pub fn function_manifest(&self) -> Result<ModelManifest, ManifestError> {
        if self.pipeline.is_some() {
            return Err(ManifestError::Invalid("pipeline manifests describe no single function".into()));
        }
        let taxonomy = self
            .taxonomy
            .ok_or_else(|| ManifestError::Invalid("taxonomy is required for functions".into()))?;
        let manifest = ModelManifest {
            name: self.name.clone(),
            version: self.version.clone(),
            taxonomy,
            input_codes: self.input_codes.clone(),
            output_codes: self.output_codes.clone(),
            memory_budget_bytes: self.memory_budget_bytes,
            description: self.description.clone(),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}
