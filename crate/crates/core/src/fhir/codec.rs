//! JSON wire codec.
//!
//! Serialization is canonical: object keys sorted, no insignificant
//! whitespace, decimals in their canonical text. Parsing ignores fields the
//! profile does not model.

use std::str::FromStr;

use chrono::NaiveDate;
use serde_json::{json, Map, Number, Value};
use thiserror::Error;

use super::decimal::Decimal;
use super::resource::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("unknown resourceType {0:?}")]
    UnknownResourceType(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invariant violation at {path}: {message}")]
    InvariantViolation { path: String, message: String },
}

type Result<T> = std::result::Result<T, CodecError>;

pub fn parse_resource(text: &str) -> Result<Resource> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CodecError::MalformedJson(e.to_string()))?;
    from_value(&value)
}

pub fn parse_resource_bytes(bytes: &[u8]) -> Result<Resource> {
    let text = std::str::from_utf8(bytes).map_err(|e| CodecError::MalformedJson(e.to_string()))?;
    parse_resource(text)
}

/// Typed view of an already-parsed JSON value.
pub fn from_value(value: &Value) -> Result<Resource> {
    let root = Obj::root(value)?;
    let resource_type = root.req_str("resourceType")?;
    let path = resource_type.to_owned();
    let resource = read_resource(resource_type, root.rebase(&path), true)?;
    if let Some((path, message)) = resource.invariant_violations(&path).into_iter().next() {
        return Err(CodecError::SchemaViolation { path, message });
    }
    Ok(resource)
}

pub fn serialize_resource(resource: &Resource) -> Result<String> {
    Ok(to_value(resource)?.to_string())
}

pub fn to_value(resource: &Resource) -> Result<Value> {
    if let Some((path, message)) =
        resource.invariant_violations(resource.resource_type()).into_iter().next()
    {
        return Err(CodecError::InvariantViolation { path, message });
    }
    Ok(write_resource(resource))
}

// ---------------------------------------------------------------------------
// Reading

struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> CodecError {
    CodecError::SchemaViolation { path: path.into(), message: message.into() }
}

impl<'a> Obj<'a> {
    fn root(value: &'a Value) -> Result<Self> {
        match value {
            Value::Object(map) => Ok(Obj { map, path: String::new() }),
            _ => Err(schema("$", "resource must be a JSON object")),
        }
    }

    fn rebase(self, path: &str) -> Self {
        Obj { map: self.map, path: path.to_owned() }
    }

    fn sub(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    fn get(&self, name: &str) -> Option<&'a Value> {
        self.map.get(name).filter(|v| !v.is_null())
    }

    fn opt_str(&self, name: &str) -> Result<Option<&'a str>> {
        match self.get(name) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(schema(self.sub(name), "expected a string")),
        }
    }

    fn req_str(&self, name: &str) -> Result<&'a str> {
        self.opt_str(name)?.ok_or_else(|| schema(self.sub(name), "required field is missing"))
    }

    fn opt_obj(&self, name: &str) -> Result<Option<Obj<'a>>> {
        match self.get(name) {
            None => Ok(None),
            Some(Value::Object(map)) => Ok(Some(Obj { map, path: self.sub(name) })),
            Some(_) => Err(schema(self.sub(name), "expected an object")),
        }
    }

    fn req_obj(&self, name: &str) -> Result<Obj<'a>> {
        self.opt_obj(name)?.ok_or_else(|| schema(self.sub(name), "required field is missing"))
    }

    fn opt_array(&self, name: &str) -> Result<Option<&'a Vec<Value>>> {
        match self.get(name) {
            None => Ok(None),
            Some(Value::Array(items)) => Ok(Some(items)),
            Some(_) => Err(schema(self.sub(name), "expected an array")),
        }
    }

    fn objects(&self, name: &str) -> Result<Vec<Obj<'a>>> {
        let Some(items) = self.opt_array(name)? else {
            return Ok(Vec::new());
        };
        items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let path = format!("{}[{i}]", self.sub(name));
                match v {
                    Value::Object(map) => Ok(Obj { map, path }),
                    _ => Err(schema(path, "expected an object")),
                }
            })
            .collect()
    }

    fn strings(&self, name: &str) -> Result<Vec<String>> {
        let Some(items) = self.opt_array(name)? else {
            return Ok(Vec::new());
        };
        items
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(schema(format!("{}[{i}]", self.sub(name)), "expected a string")),
            })
            .collect()
    }

    fn opt_decimal(&self, name: &str) -> Result<Option<Decimal>> {
        match self.get(name) {
            None => Ok(None),
            Some(Value::Number(n)) => Decimal::from_str(&n.to_string())
                .map(Some)
                .map_err(|e| schema(self.sub(name), e.to_string())),
            Some(_) => Err(schema(self.sub(name), "expected a decimal number")),
        }
    }

    fn req_decimal(&self, name: &str) -> Result<Decimal> {
        self.opt_decimal(name)?.ok_or_else(|| schema(self.sub(name), "required field is missing"))
    }

    fn opt_bool(&self, name: &str) -> Result<Option<bool>> {
        match self.get(name) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(_) => Err(schema(self.sub(name), "expected a boolean")),
        }
    }

    fn enum_field<T>(&self, name: &str, parse: fn(&str) -> Option<T>) -> Result<Option<T>> {
        match self.opt_str(name)? {
            None => Ok(None),
            Some(s) => parse(s)
                .map(Some)
                .ok_or_else(|| schema(self.sub(name), format!("unsupported value {s:?}"))),
        }
    }
}

fn read_resource(resource_type: &str, obj: Obj<'_>, top_level: bool) -> Result<Resource> {
    Ok(match resource_type {
        "Patient" => Resource::Patient(read_patient(&obj)?),
        "Observation" => Resource::Observation(read_observation(&obj)?),
        "CarePlan" => Resource::CarePlan(read_care_plan(&obj)?),
        "Endpoint" => Resource::Endpoint(read_endpoint(&obj)?),
        "Subscription" => Resource::Subscription(read_subscription(&obj)?),
        "OperationOutcome" => Resource::OperationOutcome(read_outcome(&obj)?),
        "Bundle" if top_level => Resource::Bundle(read_bundle(&obj)?),
        "Bundle" => return Err(schema(obj.path.clone(), "nested Bundle is outside the profile")),
        other => return Err(CodecError::UnknownResourceType(other.to_owned())),
    })
}

fn read_coding(obj: &Obj<'_>) -> Result<Coding> {
    Ok(Coding::new(obj.req_str("system")?, obj.req_str("code")?))
}

/// CodeableConcept; the first coding is the one the profile uses.
fn read_concept(obj: &Obj<'_>) -> Result<Coding> {
    let codings = obj.objects("coding")?;
    let first = codings.first().ok_or_else(|| schema(obj.sub("coding"), "at least one coding is required"))?;
    read_coding(first)
}

fn read_id(obj: &Obj<'_>) -> Result<String> {
    Ok(obj.req_str("id")?.to_owned())
}

fn read_patient_ref(obj: &Obj<'_>) -> Result<String> {
    let reference = obj.req_str("reference")?;
    match reference.strip_prefix("Patient/") {
        Some(id) if !id.is_empty() => Ok(id.to_owned()),
        _ => Err(schema(obj.sub("reference"), "expected a Patient/<id> reference")),
    }
}

fn read_date(obj: &Obj<'_>, name: &str) -> Result<Option<NaiveDate>> {
    match obj.opt_str(name)? {
        None => Ok(None),
        Some(s) if s.len() == 10 => NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Some)
            .map_err(|_| schema(obj.sub(name), "expected an ISO-8601 date (YYYY-MM-DD)")),
        Some(_) => Err(schema(obj.sub(name), "expected an ISO-8601 date (YYYY-MM-DD)")),
    }
}

fn read_patient(obj: &Obj<'_>) -> Result<Patient> {
    let name = match obj.objects("name")?.first() {
        Some(n) => match n.opt_str("text")? {
            Some(text) => Some(text.to_owned()),
            None => {
                let mut parts = n.strings("given")?;
                parts.extend(n.opt_str("family")?.map(str::to_owned));
                (!parts.is_empty()).then(|| parts.join(" "))
            }
        },
        None => None,
    };
    Ok(Patient {
        id: read_id(obj)?,
        name,
        gender: obj.enum_field("gender", Gender::parse)?.unwrap_or_default(),
        birth_date: read_date(obj, "birthDate")?,
    })
}

fn read_observation(obj: &Obj<'_>) -> Result<Observation> {
    let mut values = Vec::new();
    if let Some(q) = obj.opt_obj("valueQuantity")? {
        values.push(ObservationValue::Quantity {
            value: q.req_decimal("value")?,
            unit: q.opt_str("unit")?.unwrap_or_default().to_owned(),
        });
    }
    if let Some(b) = obj.opt_bool("valueBoolean")? {
        values.push(ObservationValue::Boolean(b));
    }
    if let Some(s) = obj.opt_str("valueString")? {
        values.push(ObservationValue::String(s.to_owned()));
    }
    if values.len() > 1 {
        return Err(schema(obj.sub("value[x]"), "at most one value[x] element is allowed"));
    }
    let reference_range = match obj.objects("referenceRange")?.first() {
        Some(r) => Some(ReferenceRange {
            low: r.req_obj("low")?.req_decimal("value")?,
            high: r.req_obj("high")?.req_decimal("value")?,
        }),
        None => None,
    };
    Ok(Observation {
        id: read_id(obj)?,
        code: read_concept(&obj.req_obj("code")?)?,
        value: values.pop(),
        reference_range,
        subject: obj.opt_obj("subject")?.map(|s| read_patient_ref(&s)).transpose()?,
    })
}

fn read_care_plan(obj: &Obj<'_>) -> Result<CarePlan> {
    let status = obj
        .enum_field("status", CarePlanStatus::parse)?
        .ok_or_else(|| schema(obj.sub("status"), "required field is missing"))?;
    let mut activity = Vec::new();
    for a in obj.objects("activity")? {
        let detail = a.req_obj("detail")?;
        let mut probability = None;
        for ext in detail.objects("extension")? {
            if ext.opt_str("url")? == Some(PROBABILITY_EXTENSION) {
                probability = Some(ext.req_decimal("valueDecimal")?);
            }
        }
        activity.push(Activity {
            detail: detail.opt_str("description")?.unwrap_or_default().to_owned(),
            code: read_concept(&detail.req_obj("code")?)?,
            probability,
        });
    }
    let author = match obj.opt_obj("author")? {
        Some(a) => {
            let display = a.req_str("display")?;
            Some(
                Author::from_display(display)
                    .ok_or_else(|| schema(a.sub("display"), "expected <name>@<version>"))?,
            )
        }
        None => None,
    };
    Ok(CarePlan {
        id: read_id(obj)?,
        subject: read_patient_ref(&obj.req_obj("subject")?)?,
        status,
        activity,
        author,
    })
}

fn read_endpoint(obj: &Obj<'_>) -> Result<Endpoint> {
    let status = obj
        .enum_field("status", EndpointStatus::parse)?
        .ok_or_else(|| schema(obj.sub("status"), "required field is missing"))?;
    let connection = read_coding(&obj.req_obj("connectionType")?)?;
    if connection != Coding::new(CONNECTION_TYPE_SYSTEM, CONNECTION_TYPE_CODE) {
        return Err(schema(obj.sub("connectionType"), "unsupported connection type"));
    }
    let mime = obj.strings("payloadMimeType")?;
    if mime.iter().any(|m| m != FHIR_JSON) {
        return Err(schema(obj.sub("payloadMimeType"), format!("only {FHIR_JSON} is supported")));
    }
    let payload_type =
        obj.objects("payloadType")?.iter().map(read_concept).collect::<Result<Vec<_>>>()?;
    Ok(Endpoint {
        status,
        name: obj.req_str("name")?.to_owned(),
        address: obj.req_str("address")?.to_owned(),
        header: obj.strings("header")?,
        payload_type,
    })
}

fn read_subscription(obj: &Obj<'_>) -> Result<Subscription> {
    let channel = obj.req_obj("channel")?;
    let channel_type = channel.req_str("type")?;
    if channel_type != REST_HOOK {
        return Err(schema(channel.sub("type"), format!("only {REST_HOOK} channels are supported")));
    }
    if let Some(payload) = channel.opt_str("payload")? {
        if payload != FHIR_JSON {
            return Err(schema(channel.sub("payload"), format!("only {FHIR_JSON} is supported")));
        }
    }
    Ok(Subscription {
        id: read_id(obj)?,
        criteria: obj.req_str("criteria")?.to_owned(),
        endpoint: channel.req_str("endpoint")?.to_owned(),
    })
}

fn read_outcome(obj: &Obj<'_>) -> Result<OperationOutcome> {
    let issues = obj.objects("issue")?;
    let issue = issues.first().ok_or_else(|| schema(obj.sub("issue"), "at least one issue is required"))?;
    Ok(OperationOutcome {
        severity: issue
            .enum_field("severity", Severity::parse)?
            .ok_or_else(|| schema(issue.sub("severity"), "required field is missing"))?,
        code: issue.req_str("code")?.to_owned(),
        diagnostics: issue.opt_str("diagnostics")?.unwrap_or_default().to_owned(),
    })
}

fn read_bundle(obj: &Obj<'_>) -> Result<Bundle> {
    let kind = obj.req_str("type")?;
    if kind != "collection" {
        return Err(schema(obj.sub("type"), format!("unsupported bundle type {kind:?}")));
    }
    let mut entry = Vec::new();
    for e in obj.objects("entry")? {
        let resource = e.req_obj("resource")?;
        let resource_type = resource.req_str("resourceType")?;
        let path = resource.path.clone();
        entry.push(read_resource(resource_type, resource.rebase(&path), false)?);
    }
    Ok(Bundle { entry })
}

// ---------------------------------------------------------------------------
// Writing

fn decimal(d: &Decimal) -> Value {
    // With arbitrary precision enabled the literal text is kept verbatim.
    Value::Number(Number::from_str(d.as_str()).expect("canonical decimal is a JSON number"))
}

fn coding(c: &Coding) -> Value {
    json!({ "system": c.system, "code": c.code })
}

fn concept(c: &Coding) -> Value {
    json!({ "coding": [coding(c)] })
}

fn patient_ref(id: &str) -> Value {
    json!({ "reference": format!("Patient/{id}") })
}

fn write_resource(resource: &Resource) -> Value {
    let mut map = Map::new();
    map.insert("resourceType".into(), resource.resource_type().into());
    match resource {
        Resource::Patient(p) => {
            map.insert("id".into(), p.id.clone().into());
            map.insert("gender".into(), p.gender.as_str().into());
            if let Some(name) = &p.name {
                map.insert("name".into(), json!([{ "text": name }]));
            }
            if let Some(date) = p.birth_date {
                map.insert("birthDate".into(), date.format("%Y-%m-%d").to_string().into());
            }
        }
        Resource::Observation(o) => {
            map.insert("id".into(), o.id.clone().into());
            map.insert("code".into(), concept(&o.code));
            match &o.value {
                Some(ObservationValue::Quantity { value, unit }) => {
                    map.insert("valueQuantity".into(), json!({ "value": decimal(value), "unit": unit }));
                }
                Some(ObservationValue::Boolean(b)) => {
                    map.insert("valueBoolean".into(), (*b).into());
                }
                Some(ObservationValue::String(s)) => {
                    map.insert("valueString".into(), s.clone().into());
                }
                None => {}
            }
            if let Some(r) = &o.reference_range {
                map.insert(
                    "referenceRange".into(),
                    json!([{ "low": { "value": decimal(&r.low) }, "high": { "value": decimal(&r.high) } }]),
                );
            }
            if let Some(subject) = &o.subject {
                map.insert("subject".into(), patient_ref(subject));
            }
        }
        Resource::CarePlan(c) => {
            map.insert("id".into(), c.id.clone().into());
            map.insert("status".into(), c.status.as_str().into());
            map.insert("subject".into(), patient_ref(&c.subject));
            let activity: Vec<Value> = c
                .activity
                .iter()
                .map(|a| {
                    let mut detail = Map::new();
                    detail.insert("code".into(), concept(&a.code));
                    detail.insert("description".into(), a.detail.clone().into());
                    if let Some(p) = &a.probability {
                        detail.insert(
                            "extension".into(),
                            json!([{ "url": PROBABILITY_EXTENSION, "valueDecimal": decimal(p) }]),
                        );
                    }
                    json!({ "detail": Value::Object(detail) })
                })
                .collect();
            map.insert("activity".into(), activity.into());
            if let Some(author) = &c.author {
                map.insert("author".into(), json!({ "display": author.to_string() }));
            }
        }
        Resource::Endpoint(e) => {
            map.insert("status".into(), e.status.as_str().into());
            map.insert(
                "connectionType".into(),
                coding(&Coding::new(CONNECTION_TYPE_SYSTEM, CONNECTION_TYPE_CODE)),
            );
            map.insert("name".into(), e.name.clone().into());
            map.insert("address".into(), e.address.clone().into());
            map.insert("header".into(), e.header.clone().into());
            map.insert("payloadType".into(), e.payload_type.iter().map(concept).collect::<Vec<_>>().into());
            map.insert("payloadMimeType".into(), json!([FHIR_JSON]));
        }
        Resource::Subscription(s) => {
            map.insert("id".into(), s.id.clone().into());
            map.insert("criteria".into(), s.criteria.clone().into());
            map.insert(
                "channel".into(),
                json!({ "type": REST_HOOK, "endpoint": s.endpoint, "payload": FHIR_JSON }),
            );
        }
        Resource::OperationOutcome(o) => {
            map.insert(
                "issue".into(),
                json!([{ "severity": o.severity.as_str(), "code": o.code, "diagnostics": o.diagnostics }]),
            );
        }
        Resource::Bundle(b) => {
            map.insert("type".into(), "collection".into());
            let entry: Vec<Value> = b.entry.iter().map(|r| json!({ "resource": write_resource(r) })).collect();
            map.insert("entry".into(), entry.into());
        }
    }
    Value::Object(map)
}
