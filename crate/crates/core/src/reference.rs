//! Bundled reference manifests and request builders for them.

use chrono::NaiveDate;

use crate::fhir::{Bundle, Coding, Gender, Observation, ObservationValue, Patient, Resource, Subscription};
use crate::model::builtin::arrhythmia_feature;
use crate::model::scorecard::{CCI_SYSTEM, ICD10_SYSTEM};
use crate::model::ManifestFile;

pub const ARRHYTHMIA_CLASSIFIER: &str = include_str!("../manifests/arrhythmia-classifier.json");
pub const LOS_PREDICTOR: &str = include_str!("../manifests/los-predictor.json");
pub const LOS_FOLLOWUP: &str = include_str!("../manifests/los-followup.json");
pub const LOS_PIPELINE: &str = include_str!("../manifests/los-pipeline.json");

/// The reference manifests in registration order (stages before the
/// pipeline that uses them).
pub fn reference_manifests() -> Vec<ManifestFile> {
    [ARRHYTHMIA_CLASSIFIER, LOS_PREDICTOR, LOS_FOLLOWUP, LOS_PIPELINE]
        .into_iter()
        .map(|text| ManifestFile::from_json(text).expect("bundled manifest parses"))
        .collect()
}

pub const LOS_ICD_PREFIXES: [&str; 4] = ["E11", "I50", "J44", "N18"];
pub const LOS_CCI_PREFIXES: [&str; 2] = ["1HZ", "1VA"];

fn flag(id: String, code: Coding, on: bool, patient: &str) -> Resource {
    Observation::new(id, code).with_value(ObservationValue::Boolean(on)).with_subject(patient).into()
}

/// A length-of-stay request: one boolean observation per declared prefix,
/// true for each prefix in `present`.
pub fn los_request(patient_id: &str, birth_date: NaiveDate, gender: Gender, present: &[&str]) -> Bundle {
    let mut patient = Patient::new(patient_id);
    patient.gender = gender;
    patient.birth_date = Some(birth_date);
    let mut entry: Vec<Resource> = vec![patient.into()];
    for (system, prefixes) in [(ICD10_SYSTEM, &LOS_ICD_PREFIXES[..]), (CCI_SYSTEM, &LOS_CCI_PREFIXES[..])] {
        for p in prefixes {
            entry.push(flag(format!("{patient_id}-{p}"), Coding::new(system, *p), present.contains(p), patient_id));
        }
    }
    Bundle::new(entry)
}

/// An arrhythmia request with feature `i` set from bit `i` of `bits`.
pub fn arrhythmia_request(patient_id: &str, bits: u16) -> Bundle {
    let mut entry: Vec<Resource> = vec![Patient::new(patient_id).into()];
    for i in 0..15 {
        entry.push(flag(format!("{patient_id}-f{:02}", i + 1), arrhythmia_feature(i), bits >> i & 1 == 1, patient_id));
    }
    Bundle::new(entry)
}

pub fn with_subscription(mut bundle: Bundle, id: &str, criteria: &str, endpoint: &str) -> Bundle {
    bundle.entry.push(
        Subscription { id: id.into(), criteria: criteria.into(), endpoint: endpoint.into() }.into(),
    );
    bundle
}
