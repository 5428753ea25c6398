//! Typed resources of the profiled FHIR R4 subset.

use std::fmt;

use chrono::NaiveDate;

use super::decimal::Decimal;

pub const FHIR_JSON: &str = "application/fhir+json";
pub const REST_HOOK: &str = "rest-hook";
pub const CONNECTION_TYPE_SYSTEM: &str =
    "http://terminology.hl7.org/CodeSystem/endpoint-connection-type";
pub const CONNECTION_TYPE_CODE: &str = "hl7-fhir-rest";
pub const PROBABILITY_EXTENSION: &str =
    "https://fhirfn.dev/StructureDefinition/activity-probability";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Coding {
    pub system: String,
    pub code: String,
}

impl Coding {
    pub fn new(system: impl Into<String>, code: impl Into<String>) -> Self {
        Coding { system: system.into(), code: code.into() }
    }
}

impl fmt::Display for Coding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.system, self.code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Gender {
    Male,
    Female,
    Other,
    #[default]
    Unknown,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Other => "other",
            Gender::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "male" => Gender::Male,
            "female" => Gender::Female,
            "other" => Gender::Other,
            "unknown" => Gender::Unknown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub id: String,
    pub name: Option<String>,
    pub gender: Gender,
    pub birth_date: Option<NaiveDate>,
}

impl Patient {
    pub fn new(id: impl Into<String>) -> Self {
        Patient { id: id.into(), name: None, gender: Gender::Unknown, birth_date: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObservationValue {
    Quantity { value: Decimal, unit: String },
    Boolean(bool),
    String(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceRange {
    pub low: Decimal,
    pub high: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub id: String,
    pub code: Coding,
    pub value: Option<ObservationValue>,
    pub reference_range: Option<ReferenceRange>,
    /// Id of the Patient this observation is about.
    pub subject: Option<String>,
}

impl Observation {
    pub fn new(id: impl Into<String>, code: Coding) -> Self {
        Observation { id: id.into(), code, value: None, reference_range: None, subject: None }
    }

    pub fn with_value(mut self, value: ObservationValue) -> Self {
        self.value = Some(value);
        self
    }

    pub fn with_subject(mut self, patient_id: impl Into<String>) -> Self {
        self.subject = Some(patient_id.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CarePlanStatus {
    Draft,
    Active,
    Completed,
}

impl CarePlanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CarePlanStatus::Draft => "draft",
            CarePlanStatus::Active => "active",
            CarePlanStatus::Completed => "completed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "draft" => CarePlanStatus::Draft,
            "active" => CarePlanStatus::Active,
            "completed" => CarePlanStatus::Completed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activity {
    pub detail: String,
    pub code: Coding,
    pub probability: Option<Decimal>,
}

/// Function identity stamped on generated CarePlans.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Author {
    pub name: String,
    pub version: String,
}

impl Author {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Author { name: name.into(), version: version.into() }
    }

    pub(crate) fn from_display(s: &str) -> Option<Self> {
        let (name, version) = s.rsplit_once('@')?;
        if name.is_empty() || version.is_empty() {
            return None;
        }
        Some(Author::new(name, version))
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarePlan {
    pub id: String,
    pub subject: String,
    pub status: CarePlanStatus,
    pub activity: Vec<Activity>,
    pub author: Option<Author>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EndpointStatus {
    Active,
    Suspended,
    Off,
}

impl EndpointStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointStatus::Active => "active",
            EndpointStatus::Suspended => "suspended",
            EndpointStatus::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "active" => EndpointStatus::Active,
            "suspended" => EndpointStatus::Suspended,
            "off" => EndpointStatus::Off,
            _ => return None,
        })
    }
}

/// Discovery document for one function. `connectionType` and
/// `payloadMimeType` are fixed by the profile and not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub status: EndpointStatus,
    pub name: String,
    pub address: String,
    pub header: Vec<String>,
    pub payload_type: Vec<Coding>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: String,
    /// `*` or a single activity code.
    pub criteria: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Severity {
    Fatal,
    Error,
    Warning,
    Information,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Fatal => "fatal",
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Information => "information",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fatal" => Severity::Fatal,
            "error" => Severity::Error,
            "warning" => Severity::Warning,
            "information" => Severity::Information,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationOutcome {
    pub severity: Severity,
    pub code: String,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bundle {
    pub entry: Vec<Resource>,
}

impl Bundle {
    pub fn new(entry: Vec<Resource>) -> Self {
        Bundle { entry }
    }

    pub fn patients(&self) -> impl Iterator<Item = &Patient> {
        self.entry.iter().filter_map(|r| match r {
            Resource::Patient(p) => Some(p),
            _ => None,
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.entry.iter().filter_map(|r| match r {
            Resource::Observation(o) => Some(o),
            _ => None,
        })
    }

    pub fn care_plans(&self) -> impl Iterator<Item = &CarePlan> {
        self.entry.iter().filter_map(|r| match r {
            Resource::CarePlan(c) => Some(c),
            _ => None,
        })
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.entry.iter().filter_map(|r| match r {
            Resource::Subscription(s) => Some(s),
            _ => None,
        })
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &Endpoint> {
        self.entry.iter().filter_map(|r| match r {
            Resource::Endpoint(e) => Some(e),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resource {
    Patient(Patient),
    Observation(Observation),
    CarePlan(CarePlan),
    Endpoint(Endpoint),
    Subscription(Subscription),
    OperationOutcome(OperationOutcome),
    Bundle(Bundle),
}

impl Resource {
    pub fn resource_type(&self) -> &'static str {
        match self {
            Resource::Patient(_) => "Patient",
            Resource::Observation(_) => "Observation",
            Resource::CarePlan(_) => "CarePlan",
            Resource::Endpoint(_) => "Endpoint",
            Resource::Subscription(_) => "Subscription",
            Resource::OperationOutcome(_) => "OperationOutcome",
            Resource::Bundle(_) => "Bundle",
        }
    }

    /// Type-local invariant violations as `(path, message)` pairs.
    /// Cross-resource rules (reference closure, dates against a clock)
    /// live in bundle validation.
    pub fn invariant_violations(&self, path: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: &str| out.push((format!("{path}.{field}"), msg.to_owned()));
        match self {
            Resource::Patient(p) => {
                if p.id.is_empty() {
                    bad("id", "must be non-empty");
                }
            }
            Resource::Observation(o) => {
                if o.id.is_empty() {
                    bad("id", "must be non-empty");
                }
                if o.code.code.is_empty() {
                    bad("code.coding[0].code", "must be non-empty");
                }
                if let Some(range) = &o.reference_range {
                    if range.low.to_f64() > range.high.to_f64() {
                        bad("referenceRange[0]", "low must not exceed high");
                    }
                }
            }
            Resource::CarePlan(c) => {
                if c.id.is_empty() {
                    bad("id", "must be non-empty");
                }
                if c.subject.is_empty() {
                    bad("subject", "must reference a Patient");
                }
                if c.activity.is_empty() {
                    bad("activity", "at least one activity is required");
                }
                for (i, a) in c.activity.iter().enumerate() {
                    if a.code.code.is_empty() {
                        bad(&format!("activity[{i}].detail.code"), "must be non-empty");
                    }
                    if let Some(p) = &a.probability {
                        let v = p.to_f64();
                        if !(0.0..=1.0).contains(&v) {
                            bad(&format!("activity[{i}].detail.extension"), "probability must lie in [0,1]");
                        }
                    }
                }
            }
            Resource::Endpoint(e) => {
                if e.name.is_empty() {
                    bad("name", "must be non-empty");
                }
                match absolute_url(&e.address) {
                    Some(url) => {
                        let last = url.path_segments().and_then(|mut s| s.next_back()).unwrap_or("");
                        if last != e.name {
                            bad("address", "path must terminate in the function name");
                        }
                    }
                    None => bad("address", "must be an absolute URL"),
                }
            }
            Resource::Subscription(s) => {
                if s.id.is_empty() {
                    bad("id", "must be non-empty");
                }
                if s.criteria.is_empty() {
                    bad("criteria", "must be non-empty");
                }
                if absolute_url(&s.endpoint).is_none() {
                    bad("channel.endpoint", "must be an absolute URL");
                }
            }
            Resource::OperationOutcome(o) => {
                if o.code.is_empty() {
                    bad("issue[0].code", "must be non-empty");
                }
            }
            Resource::Bundle(b) => {
                for (i, r) in b.entry.iter().enumerate() {
                    let entry_path = format!("{path}.entry[{i}].resource");
                    if matches!(r, Resource::Bundle(_)) {
                        out.push((entry_path, "nested Bundle is outside the profile".to_owned()));
                    } else {
                        out.extend(r.invariant_violations(&entry_path));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn absolute_url(text: &str) -> Option<url::Url> {
    let url = url::Url::parse(text).ok()?;
    if url.cannot_be_a_base() || url.host().is_none() {
        return None;
    }
    Some(url)
}

macro_rules! impl_from_resource {
    ($($variant:ident),*) => {
        $(impl From<$variant> for Resource {
            fn from(v: $variant) -> Self {
                Resource::$variant(v)
            }
        })*
    };
}

impl_from_resource!(Patient, Observation, CarePlan, Endpoint, Subscription, OperationOutcome, Bundle);
