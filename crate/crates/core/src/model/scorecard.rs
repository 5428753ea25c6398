//! Length-of-stay vectorization and the logistic scorecard.
//!
//! Records become binary features: age over 40, male gender, and one flag
//! per 3-character ICD (diagnosis) or CCI (intervention) prefix. The
//! scorecard weights shipped with the reference manifest are illustrative
//! and carry no clinical meaning.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use thiserror::Error;

use crate::fhir::{Gender, Observation, ObservationValue, Patient};

pub const ICD10_SYSTEM: &str = "http://hl7.org/fhir/sid/icd-10";
pub const CCI_SYSTEM: &str = "https://www.cihi.ca/cci";

pub const AGE_OVER_40: &str = "age_over_40";
pub const GENDER_MALE: &str = "gender_male";
const AGE_THRESHOLD_YEARS: i32 = 40;
const PREFIX_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScorecardError {
    #[error("patient {0} has no birthDate")]
    MissingBirthDate(String),
    #[error("expected {expected} weights, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

/// Binary features keyed by name; iteration order is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector(BTreeMap<String, u8>);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<u8> {
        self.0.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.values().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u8)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn set(&mut self, name: impl Into<String>, on: bool) {
        self.0.insert(name.into(), u8::from(on));
    }
}

pub fn icd_feature(prefix: &str) -> String {
    format!("icd_{prefix}")
}

pub fn cci_feature(prefix: &str) -> String {
    format!("cci_{prefix}")
}

/// Feature names in vector order for the given prefix lists.
pub fn feature_names(icd_prefixes: &[String], cci_prefixes: &[String]) -> Vec<String> {
    let mut names: Vec<String> = [AGE_OVER_40.to_owned(), GENDER_MALE.to_owned()]
        .into_iter()
        .chain(icd_prefixes.iter().map(|p| icd_feature(p)))
        .chain(cci_prefixes.iter().map(|p| cci_feature(p)))
        .collect();
    names.sort();
    names.dedup();
    names
}

/// Whole years completed between `born` and `on`.
pub fn completed_years(born: NaiveDate, on: NaiveDate) -> i32 {
    let mut years = on.year() - born.year();
    if (on.month(), on.day()) < (born.month(), born.day()) {
        years -= 1;
    }
    years
}

fn code_prefix(code: &str) -> Option<&str> {
    let end = code.char_indices().nth(PREFIX_LEN).map_or(code.len(), |(i, _)| i);
    (code[..end].chars().count() == PREFIX_LEN).then(|| &code[..end])
}

/// An observation asserts its code unless it carries an explicit `false`.
fn asserted(obs: &Observation) -> bool {
    !matches!(obs.value, Some(ObservationValue::Boolean(false)))
}

pub fn los_featurize(
    patient: &Patient,
    observations: &[Observation],
    icd_prefixes: &[String],
    cci_prefixes: &[String],
    as_of: NaiveDate,
) -> Result<FeatureVector, ScorecardError> {
    let born = patient.birth_date.ok_or_else(|| ScorecardError::MissingBirthDate(patient.id.clone()))?;
    let mut v = FeatureVector::default();
    v.set(AGE_OVER_40, completed_years(born, as_of) > AGE_THRESHOLD_YEARS);
    v.set(GENDER_MALE, patient.gender == Gender::Male);

    let present = |system: &str, prefix: &str| {
        observations.iter().any(|o| o.code.system == system && asserted(o) && code_prefix(&o.code.code) == Some(prefix))
    };
    for p in icd_prefixes {
        v.set(icd_feature(p), present(ICD10_SYSTEM, p));
    }
    for p in cci_prefixes {
        v.set(cci_feature(p), present(CCI_SYSTEM, p));
    }
    Ok(v)
}

pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep the result inside the open unit interval even when saturated.
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Logistic score over the features in vector order.
pub fn los_predict(features: &FeatureVector, weights: &[f64], bias: f64) -> Result<f64, ScorecardError> {
    if weights.len() != features.len() {
        return Err(ScorecardError::ArityMismatch { expected: features.len(), got: weights.len() });
    }
    let z = bias + features.values().zip(weights).map(|(f, w)| f64::from(f) * w).sum::<f64>();
    Ok(sigmoid(z))
}
