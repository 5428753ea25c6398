//! Versioned function registry with hot-swap draining.
//!
//! Registering a new version of a name makes it active at once; the
//! previously active version drains (serves its in-flight requests, admits
//! nothing new) and is retired once idle.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::fhir::{Bundle, EndpointStatus, Resource};
use crate::gateway::describe_endpoint;
use crate::model::builtin::resolve_builtin;
use crate::model::{Handler, ManifestError, ManifestFile, ModelManifest, ModelTaxonomy, StageRef};
use crate::pipeline::{self, composed_manifest, ManifestLookup, PipelineError, PipelineSpec};
use crate::scaler::{FunctionKey, ScalerOverrides};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("{name}@{version} is already registered")]
    DuplicateVersion { name: String, version: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("memory budget of {requested} bytes exceeds the 2 GiB limit")]
    BudgetExceeded { requested: u64 },
    #[error("{0} is not registered")]
    NotFound(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl From<ManifestError> for RegistryError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::BudgetExceeded { requested } => RegistryError::BudgetExceeded { requested },
            other => RegistryError::InvalidManifest(other.to_string()),
        }
    }
}

impl From<PipelineError> for RegistryError {
    fn from(e: PipelineError) -> Self {
        RegistryError::InvalidManifest(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryState {
    Active,
    Draining,
    Retired,
}

#[derive(Clone)]
pub enum Target {
    Function(Arc<dyn Handler>),
    Pipeline(PipelineSpec),
}

impl std::fmt::Debug for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Function(_) => f.write_str("Function(..)"),
            Target::Pipeline(p) => f.debug_tuple("Pipeline").field(p).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub manifest: ModelManifest,
    pub target: Target,
    pub state: EntryState,
    pub registered_at: Timestamp,
    pub scaling: ScalerOverrides,
    /// Manifest file this entry came from; entries without one are not
    /// written to snapshots.
    pub source: Option<ManifestFile>,
    seq: u64,
    in_flight: Arc<AtomicU32>,
}

impl RegistryEntry {
    pub fn key(&self) -> FunctionKey {
        FunctionKey::new(&self.manifest.name, &self.manifest.version)
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn endpoint_status(&self) -> EndpointStatus {
        match self.state {
            EntryState::Active => EndpointStatus::Active,
            EntryState::Draining => EndpointStatus::Suspended,
            EntryState::Retired => EndpointStatus::Off,
        }
    }

    /// Marks one request as in flight on this version until the guard drops.
    pub fn begin(&self) -> InFlight {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        InFlight { counter: Arc::clone(&self.in_flight) }
    }
}

/// In-flight marker for one admitted request.
#[derive(Debug)]
pub struct InFlight {
    counter: Arc<AtomicU32>,
}

impl InFlight {
    /// Ends the request; true if it was the version's last in-flight one.
    pub fn finish(self) -> bool {
        let last = self.counter.load(Ordering::SeqCst) == 1;
        drop(self);
        last
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no function named {0}")]
    UnknownFunction(String),
    #[error("{name}@{version} is not the active version")]
    InactiveVersion { name: String, version: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    functions: Vec<ManifestFile>,
}

#[derive(Debug, Default)]
pub struct Registry {
    functions: BTreeMap<String, Vec<RegistryEntry>>,
    next_seq: u64,
}

impl ManifestLookup for Registry {
    fn stage_manifest(&self, stage: &StageRef) -> Option<ModelManifest> {
        let entry = self.route(&stage.function, stage.version.as_deref()).ok()?;
        matches!(entry.target, Target::Function(_)).then(|| entry.manifest.clone())
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        manifest: ModelManifest,
        target: Target,
        scaling: ScalerOverrides,
        source: Option<ManifestFile>,
        now: Timestamp,
    ) -> Result<&RegistryEntry, RegistryError> {
        manifest.validate()?;
        if let Target::Pipeline(spec) = &target {
            let report = pipeline::validate_pipeline(spec, self)?;
            if !report.is_valid() {
                return Err(RegistryError::InvalidManifest(report.to_string()));
            }
        }
        let versions = self.functions.entry(manifest.name.clone()).or_default();
        if versions.iter().any(|e| e.state != EntryState::Retired && e.manifest.version == manifest.version) {
            return Err(RegistryError::DuplicateVersion { name: manifest.name, version: manifest.version });
        }
        versions.retain(|e| !(e.state == EntryState::Retired && e.manifest.version == manifest.version));
        for e in versions.iter_mut().filter(|e| e.state == EntryState::Active) {
            e.state = EntryState::Draining;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        versions.push(RegistryEntry {
            manifest,
            target,
            state: EntryState::Active,
            registered_at: now,
            scaling,
            source,
            seq,
            in_flight: Arc::new(AtomicU32::new(0)),
        });
        Ok(versions.last().expect("just pushed"))
    }

    /// Registers a manifest file, resolving its built-in handler or its
    /// pipeline stages.
    pub fn register_file(&mut self, file: &ManifestFile, now: Timestamp) -> Result<&RegistryEntry, RegistryError> {
        let (manifest, target) = self.resolve_file(file)?;
        let scaling = file.scaling.clone().unwrap_or_default();
        self.register(manifest, target, scaling, Some(file.clone()), now)
    }

    pub fn resolve_file(&self, file: &ManifestFile) -> Result<(ModelManifest, Target), RegistryError> {
        if file.memory_budget_bytes > crate::model::MAX_MEMORY_BUDGET_BYTES {
            return Err(RegistryError::BudgetExceeded { requested: file.memory_budget_bytes });
        }
        match (&file.handler, &file.pipeline) {
            (Some(_), Some(_)) => Err(RegistryError::InvalidManifest("set either handler or pipeline, not both".into())),
            (None, None) => Err(RegistryError::InvalidManifest("a manifest needs a handler or a pipeline".into())),
            (Some(handler), None) => {
                let manifest = file.function_manifest()?;
                if matches!(manifest.taxonomy, ModelTaxonomy::Environment | ModelTaxonomy::Interaction) {
                    return Err(RegistryError::InvalidManifest(format!(
                        "no built-in handler serves {} models; register a custom handler",
                        manifest.taxonomy.as_str()
                    )));
                }
                let handler = resolve_builtin(handler, &manifest, &file.parameters)?;
                Ok((manifest, Target::Function(handler)))
            }
            (None, Some(stages)) => {
                let spec = PipelineSpec { name: file.name.clone(), stages: stages.clone() };
                let (manifest, spec) = self.pipeline_manifest(file, spec)?;
                Ok((manifest, Target::Pipeline(spec)))
            }
        }
    }

    fn pipeline_manifest(
        &self,
        file: &ManifestFile,
        spec: PipelineSpec,
    ) -> Result<(ModelManifest, PipelineSpec), RegistryError> {
        if spec.stages.len() < 2 {
            return Err(PipelineError::TooFewStages(spec.name).into());
        }
        if !file.input_codes.is_empty() || !file.output_codes.is_empty() {
            return Err(RegistryError::InvalidManifest("pipeline codes are derived from their stages".into()));
        }
        let stages = pipeline::resolve(&spec, self)?;
        let mut manifest = composed_manifest(&file.name, &file.version, &file.description, &stages);
        if let Some(t) = file.taxonomy {
            manifest.taxonomy = t;
        }
        manifest.validate()?;
        Ok((manifest, spec))
    }

    pub fn deregister(&mut self, name: &str, version: &str) -> Result<EntryState, RegistryError> {
        let entry = self
            .functions
            .get_mut(name)
            .and_then(|v| v.iter_mut().find(|e| e.manifest.version == version && e.state != EntryState::Retired))
            .ok_or_else(|| RegistryError::NotFound(format!("{name}@{version}")))?;
        entry.state = if entry.in_flight() == 0 { EntryState::Retired } else { EntryState::Draining };
        Ok(entry.state)
    }

    /// Retires draining entries with nothing in flight. Returns how many.
    pub fn reap(&mut self) -> usize {
        let mut n = 0;
        for e in self.functions.values_mut().flatten() {
            if e.state == EntryState::Draining && e.in_flight() == 0 {
                e.state = EntryState::Retired;
                n += 1;
            }
        }
        n
    }

    pub fn active(&self, name: &str) -> Option<&RegistryEntry> {
        self.functions.get(name)?.iter().find(|e| e.state == EntryState::Active)
    }

    /// The entry discovery should describe: the active one, else the most
    /// recent draining one.
    pub fn current(&self, name: &str) -> Option<&RegistryEntry> {
        self.active(name).or_else(|| {
            self.functions.get(name)?.iter().rev().find(|e| e.state == EntryState::Draining)
        })
    }

    pub fn entry(&self, name: &str, version: &str) -> Option<&RegistryEntry> {
        self.functions.get(name)?.iter().find(|e| e.manifest.version == version)
    }

    /// Version that admits new requests for `name`, optionally pinned.
    pub fn route(&self, name: &str, pin: Option<&str>) -> Result<&RegistryEntry, RouteError> {
        let active = self.active(name).ok_or_else(|| RouteError::UnknownFunction(name.to_owned()))?;
        match pin {
            Some(v) if v != active.manifest.version => {
                Err(RouteError::InactiveVersion { name: name.to_owned(), version: v.to_owned() })
            }
            _ => Ok(active),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.functions.values().flatten()
    }

    pub fn active_entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries().filter(|e| e.state == EntryState::Active)
    }

    /// Discovery index: one Endpoint per active entry, sorted by name.
    pub fn list_endpoints(&self, base_url: &str) -> Bundle {
        let entry = self
            .active_entries()
            .map(|e| Resource::Endpoint(describe_endpoint(&e.manifest, base_url, e.endpoint_status())))
            .collect();
        Bundle::new(entry)
    }

    pub fn snapshot_json(&self) -> String {
        let mut active: Vec<&RegistryEntry> = self.active_entries().filter(|e| e.source.is_some()).collect();
        active.sort_by_key(|e| e.seq);
        let snapshot = Snapshot { functions: active.into_iter().filter_map(|e| e.source.clone()).collect() };
        serde_json::to_string_pretty(&snapshot).expect("snapshot serializes")
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), RegistryError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.snapshot_json()).map_err(|e| RegistryError::Snapshot(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| RegistryError::Snapshot(e.to_string()))
    }

    /// Registers every manifest in the snapshot at `path`; a missing file
    /// is an empty snapshot.
    pub fn load_snapshot(&mut self, path: &Path, now: Timestamp) -> Result<usize, RegistryError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(RegistryError::Snapshot(e.to_string())),
        };
        let snapshot: Snapshot = serde_json::from_str(&text).map_err(|e| RegistryError::Snapshot(e.to_string()))?;
        let mut n = 0;
        for file in &snapshot.functions {
            match self.register_file(file, now) {
                Ok(_) => n += 1,
                Err(RegistryError::DuplicateVersion { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(n)
    }
}
