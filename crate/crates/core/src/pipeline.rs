//! Model chaining over the uniform Bundle format.
//!
//! Stage `i` receives the original Patient and Observations plus every
//! CarePlan activity produced by stages before it, re-expressed as an
//! Observation: code = activity code, value = probability (unit `1`) or
//! `true` when the activity has no probability. The pipeline response is
//! the Patient followed by every stage's CarePlans in stage order.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::fhir::{Bundle, Coding, Observation, ObservationValue, OperationOutcome, Resource, ValidationReport};
use crate::model::{ModelManifest, StageRef};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSpec {
    pub name: String,
    pub stages: Vec<StageRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("pipeline {0} needs at least two stages")]
    TooFewStages(String),
    #[error("stage {index} ({stage}) is not a registered function")]
    UnknownStage { index: usize, stage: String },
}

/// Resolves stage references to the manifests they would run.
pub trait ManifestLookup {
    fn stage_manifest(&self, stage: &StageRef) -> Option<ModelManifest>;
}

/// Codes visible to each stage, cumulatively: the pass-through inputs of
/// the first stage plus the declared outputs of every earlier stage.
pub fn validate_pipeline(spec: &PipelineSpec, registry: &dyn ManifestLookup) -> Result<ValidationReport, PipelineError> {
    if spec.stages.len() < 2 {
        return Err(PipelineError::TooFewStages(spec.name.clone()));
    }
    let manifests = resolve(spec, registry)?;
    let mut report = ValidationReport::default();
    let mut visible: BTreeSet<Coding> = manifests[0].input_codes.clone();
    for (i, pair) in manifests.windows(2).enumerate() {
        let (f, g) = (&pair[0], &pair[1]);
        visible.extend(f.output_codes.iter().cloned());
        for code in g.input_codes.difference(&visible) {
            report.push(
                format!("pipeline.stage[{}]", i + 2),
                format!("stage {} ({}) requires {code}, which no earlier stage or the request provides", i + 2, g.name),
            );
        }
    }
    Ok(report)
}

pub(crate) fn resolve(spec: &PipelineSpec, registry: &dyn ManifestLookup) -> Result<Vec<ModelManifest>, PipelineError> {
    spec.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            registry
                .stage_manifest(s)
                .ok_or_else(|| PipelineError::UnknownStage { index: i + 1, stage: s.to_string() })
        })
        .collect()
}

/// Manifest under which a pipeline is discoverable: stage-1 inputs, union
/// of all outputs, taxonomy of the last stage.
pub fn composed_manifest(
    name: &str,
    version: &str,
    description: &str,
    stages: &[ModelManifest],
) -> ModelManifest {
    let last = stages.last().expect("pipelines have stages");
    ModelManifest {
        name: name.to_owned(),
        version: version.to_owned(),
        taxonomy: last.taxonomy,
        input_codes: stages[0].input_codes.clone(),
        output_codes: stages.iter().flat_map(|m| m.output_codes.iter().cloned()).collect(),
        memory_budget_bytes: stages.iter().map(|m| m.memory_budget_bytes).max().unwrap_or(0),
        description: description.to_owned(),
    }
}

/// Observations that carry one stage's CarePlan activities to later stages.
pub fn rewrap(response: &Bundle) -> Vec<Observation> {
    let mut out = Vec::new();
    for plan in response.care_plans() {
        for (j, a) in plan.activity.iter().enumerate() {
            let value = match &a.probability {
                Some(p) => ObservationValue::Quantity { value: p.clone(), unit: "1".into() },
                None => ObservationValue::Boolean(true),
            };
            out.push(
                Observation::new(format!("{}-a{j}", plan.id), a.code.clone())
                    .with_value(value)
                    .with_subject(plan.subject.clone()),
            );
        }
    }
    out
}

/// The request bundle for the stage following `prior` responses.
pub fn stage_request(original: &Bundle, prior: &[Bundle]) -> Bundle {
    let mut entry: Vec<Resource> = Vec::new();
    entry.extend(original.patients().cloned().map(Resource::from));
    entry.extend(original.observations().cloned().map(Resource::from));
    for response in prior {
        entry.extend(rewrap(response).into_iter().map(Resource::from));
    }
    Bundle::new(entry)
}

/// Final pipeline response: Patient, then every stage's CarePlans.
pub fn assemble_response(original: &Bundle, responses: &[Bundle]) -> Bundle {
    let mut entry: Vec<Resource> = original.patients().cloned().map(Resource::from).collect();
    for r in responses {
        entry.extend(r.care_plans().cloned().map(Resource::from));
    }
    Bundle::new(entry)
}

/// A stage error, annotated with its 1-based stage index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFailure {
    pub stage: usize,
    pub status: u16,
    pub outcome: OperationOutcome,
}

impl StageFailure {
    pub fn annotated(stage: usize, status: u16, mut outcome: OperationOutcome) -> Self {
        outcome.diagnostics = format!("stage {stage}: {}", outcome.diagnostics);
        StageFailure { stage, status, outcome }
    }
}

/// Runs stages strictly in order through `invoke`, which receives the
/// 1-based stage index, the stage reference and the stage request.
pub fn run_pipeline<F>(spec: &PipelineSpec, request: &Bundle, mut invoke: F) -> Result<Bundle, StageFailure>
where
    F: FnMut(usize, &StageRef, &Bundle) -> Result<Bundle, (u16, OperationOutcome)>,
{
    let mut responses = Vec::with_capacity(spec.stages.len());
    for (i, stage) in spec.stages.iter().enumerate() {
        let stage_req = stage_request(request, &responses);
        let response =
            invoke(i + 1, stage, &stage_req).map_err(|(status, oo)| StageFailure::annotated(i + 1, status, oo))?;
        responses.push(response);
    }
    Ok(assemble_response(request, &responses))
}
