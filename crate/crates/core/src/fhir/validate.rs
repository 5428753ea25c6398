use std::collections::{BTreeSet, HashSet};
use std::fmt;

use chrono::NaiveDate;

use super::resource::{Bundle, Coding, Resource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Request bundle on its way into a function.
    Inbound,
    /// Response bundle produced by a function.
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub(crate) fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Protocol-level checks for a request or response bundle.
///
/// Violations are collected, never raised. `as_of`, when given, is the
/// evaluation date used to reject birth dates in the future.
pub fn validate_bundle(
    bundle: &Bundle,
    direction: Direction,
    expected_codes: &BTreeSet<Coding>,
    as_of: Option<NaiveDate>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (path, message) in Resource::Bundle(bundle.clone()).invariant_violations("Bundle") {
        report.push(path, message);
    }

    let patient_ids: HashSet<&str> = bundle.patients().map(|p| p.id.as_str()).collect();
    let entry_path = |i: usize| format!("Bundle.entry[{i}].resource");
    for (i, resource) in bundle.entry.iter().enumerate() {
        let subject = match resource {
            Resource::Observation(o) => o.subject.as_deref(),
            Resource::CarePlan(c) => Some(c.subject.as_str()),
            Resource::Patient(p) => {
                if let (Some(born), Some(today)) = (p.birth_date, as_of) {
                    if born > today {
                        report.push(format!("{}.birthDate", entry_path(i)), "birth date lies in the future");
                    }
                }
                None
            }
            _ => None,
        };
        if let Some(id) = subject {
            if !patient_ids.contains(id) {
                report.push(
                    format!("{}.subject", entry_path(i)),
                    format!("dangling reference Patient/{id}"),
                );
            }
        }
    }

    let patients = bundle.patients().count();
    match patients {
        0 => report.push("Bundle.entry", "missing Patient"),
        1 => {}
        n => report.push("Bundle.entry", format!("expected exactly one Patient, found {n}")),
    }

    match direction {
        Direction::Inbound => {
            if bundle.observations().next().is_none() {
                report.push("Bundle.entry", "missing Observation");
            }
            let present: HashSet<&Coding> = bundle.observations().map(|o| &o.code).collect();
            for code in expected_codes {
                if !present.contains(code) {
                    report.push("Bundle.entry", format!("missing Observation with code {code}"));
                }
            }
        }
        Direction::Outbound => {
            if bundle.care_plans().next().is_none() {
                report.push("Bundle.entry", "missing CarePlan");
            }
        }
    }
    report
}
