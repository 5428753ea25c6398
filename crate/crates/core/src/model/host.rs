//! The stateless function contract.
//!
//! A handler maps a request bundle to a response bundle and nothing else.
//! The host validates the response, stamps authorship on every CarePlan and
//! assigns CarePlan ids, deterministically from a request hash when asked.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fhir::{
    self, make_operation_outcome, validate_bundle, Activity, Author, Bundle, CarePlan, CarePlanStatus, Coding,
    Decimal, Direction, OperationOutcome, Resource, Severity,
};

use super::manifest::ModelManifest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvocationContext {
    /// Evaluation date for age-dependent features.
    pub as_of: NaiveDate,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct HandlerFault(pub String);

pub trait Handler: Send + Sync {
    fn handle(&self, ctx: &InvocationContext, request: &Bundle) -> Result<Bundle, HandlerFault>;
}

impl<F> Handler for F
where
    F: Fn(&InvocationContext, &Bundle) -> Result<Bundle, HandlerFault> + Send + Sync,
{
    fn handle(&self, ctx: &InvocationContext, request: &Bundle) -> Result<Bundle, HandlerFault> {
        self(ctx, request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("handler fault: {0}")]
    HandlerFault(String),
    #[error("handler returned an invalid bundle: {0}")]
    ContractBreach(String),
}

impl InvokeError {
    pub fn to_outcome(&self) -> OperationOutcome {
        match self {
            InvokeError::HandlerFault(msg) => make_operation_outcome("exception", Severity::Error, msg.clone()),
            InvokeError::ContractBreach(msg) => make_operation_outcome("invalid-output", Severity::Error, msg.clone()),
        }
    }
}

/// Hex SHA-256 over the function identity and canonical request bytes.
pub fn request_digest(name: &str, version: &str, request: &Bundle) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0]);
    h.update(version.as_bytes());
    h.update([0]);
    h.update(fhir::to_json(request.clone()).as_bytes());
    hex::encode(h.finalize())
}

pub fn invoke_model(
    manifest: &ModelManifest,
    handler: &dyn Handler,
    request: &Bundle,
    ctx: &InvocationContext,
) -> Result<Bundle, InvokeError> {
    let outcome = catch_unwind(AssertUnwindSafe(|| handler.handle(ctx, request)));
    let mut response = match outcome {
        Ok(Ok(bundle)) => bundle,
        Ok(Err(fault)) => return Err(InvokeError::HandlerFault(fault.0)),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "handler panicked".to_owned());
            return Err(InvokeError::HandlerFault(msg));
        }
    };

    let report = validate_bundle(&response, Direction::Outbound, &BTreeSet::new(), None);
    if !report.is_valid() {
        return Err(InvokeError::ContractBreach(report.to_string()));
    }
    let echoed = request.patients().next().is_some_and(|p| response.patients().any(|r| r == p));
    if !echoed {
        return Err(InvokeError::ContractBreach("response does not echo the request Patient".into()));
    }

    let author = manifest.author();
    let seed = ctx.deterministic.then(|| request_digest(&manifest.name, &manifest.version, request));
    let mut n = 0;
    for resource in &mut response.entry {
        if let Resource::CarePlan(plan) = resource {
            plan.author = Some(author.clone());
            plan.id = match &seed {
                Some(seed) => format!("{}-{}-{n}", manifest.name, &seed[..16]),
                None => format!("{}-{}", manifest.name, uuid::Uuid::new_v4().simple()),
            };
            n += 1;
        }
    }
    Ok(response)
}

/// A single-activity CarePlan carrying a prediction.
pub fn wrap_careplan(prediction: f64, label: &Coding, patient_id: &str, author: &Author) -> CarePlan {
    debug_assert!((0.0..=1.0).contains(&prediction));
    let probability = Decimal::from_f64(prediction.clamp(0.0, 1.0)).ok();
    CarePlan {
        id: format!("{}-{}", author.name, label.code),
        subject: patient_id.to_owned(),
        status: CarePlanStatus::Active,
        activity: vec![Activity { detail: label.code.clone(), code: label.clone(), probability }],
        author: Some(author.clone()),
    }
}
