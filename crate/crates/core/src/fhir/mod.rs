//! Profiled FHIR R4 subset: resource model, canonical JSON codec and
//! bundle validation.

mod codec;
mod decimal;
mod resource;
mod validate;

pub use codec::{from_value, parse_resource, parse_resource_bytes, serialize_resource, to_value, CodecError};
pub use decimal::{Decimal, DecimalError};
pub use resource::*;
pub use validate::{validate_bundle, Direction, ValidationReport, Violation};

pub fn make_operation_outcome(
    code: impl Into<String>,
    severity: Severity,
    diagnostics: impl Into<String>,
) -> OperationOutcome {
    let code = code.into();
    debug_assert!(!code.is_empty());
    OperationOutcome { severity, code, diagnostics: diagnostics.into() }
}

/// Serializes a resource that is known to satisfy its invariants.
pub(crate) fn to_json(resource: impl Into<Resource>) -> String {
    let resource = resource.into();
    serialize_resource(&resource)
        .unwrap_or_else(|e| panic!("internally built {} is invalid: {e}", resource.resource_type()))
}
