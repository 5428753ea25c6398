//! Inputs shared by the benchmarks.

use fhirfn_core::fhir::{parse_resource, Bundle, Resource};

/// Canonical text of the reference length-of-stay request.
pub const LOS_REQUEST: &str = include_str!("../../../corpus/resources/bundle-los-request.json");

pub fn los_request() -> Bundle {
    match parse_resource(LOS_REQUEST) {
        Ok(Resource::Bundle(b)) => b,
        other => panic!("bundled request is not a Bundle: {other:?}"),
    }
}

/// All 2^15 arrhythmia feature vectors.
pub fn all_feature_vectors() -> Vec<[u8; 15]> {
    (0..1u16 << 15)
        .map(|bits| std::array::from_fn(|i| (bits >> i & 1) as u8))
        .collect()
}
