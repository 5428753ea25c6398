//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use fhirfn_core::fhir::{
    self, Activity, Author, Bundle, CarePlan, CarePlanStatus, Coding, Decimal, Endpoint, EndpointStatus, Gender,
    Observation, ObservationValue, OperationOutcome, Patient, ReferenceRange, Resource, Severity, Subscription,
};
use fhirfn_core::model::{ManifestFile, ModelTaxonomy, StageRef};
use fhirfn_core::subscriptions::Sink;
use fhirfn_core::{Gateway, GatewayConfig, LogicalClock, ScalerConfig};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// `(file name, parsed JSON)` for every fixture under `corpus/<sub>`, sorted.
pub fn corpus(sub: &str) -> Vec<(String, Value)> {
    let dir = workspace().join("corpus").join(sub);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let value = serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_name().unwrap().to_string_lossy().into_owned(), value)
        })
        .collect()
}

pub fn as_of() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()
}

pub fn deterministic_config() -> GatewayConfig {
    GatewayConfig { deterministic_mode: true, as_of: Some(as_of()), ..GatewayConfig::default() }
}

/// A gateway on a logical clock with the reference functions registered.
pub fn reference_gateway(config: GatewayConfig) -> (Gateway, Arc<LogicalClock>) {
    let clock = Arc::new(LogicalClock::new());
    let gw = Gateway::builder(config).clock(clock.clone()).scaler(ScalerConfig::default()).build();
    for m in fhirfn_core::reference::reference_manifests() {
        gw.register_file(&m).unwrap();
    }
    (gw, clock)
}

// ---- HTTP conformance ----

/// Runs one `corpus/http` case against a live server.
pub fn run_http_case(client: &reqwest::blocking::Client, base: &str, case: &Value) -> Result<(), String> {
    let req = &case["request"];
    let method: reqwest::Method = req["method"].as_str().unwrap().parse().map_err(|e| format!("{e}"))?;
    let mut builder = client.request(method, format!("{base}{}", req["path"].as_str().unwrap()));
    if let Some(headers) = req["headers"].as_object() {
        for (k, v) in headers {
            builder = builder.header(k.as_str(), v.as_str().unwrap());
        }
    }
    if let Some(text) = req["body_text"].as_str() {
        builder = builder.body(text.to_owned());
    } else if !req["body"].is_null() {
        builder = builder.body(req["body"].to_string());
    }
    let res = builder.send().map_err(|e| e.to_string())?;
    let status = res.status().as_u16();
    let body = res.text().map_err(|e| e.to_string())?;
    let expect = &case["expect"];
    if u64::from(status) != expect["status"].as_u64().unwrap() {
        return Err(format!("status {status}, expected {}: {body}", expect["status"]));
    }
    let resource = fhir::parse_resource(&body).map_err(|e| format!("unparseable body ({e}): {body}"))?;
    if status >= 400 && !matches!(resource, Resource::OperationOutcome(_)) {
        return Err(format!("error status {status} without an OperationOutcome"));
    }
    if resource.resource_type() != expect["resourceType"].as_str().unwrap() {
        return Err(format!("got a {}, expected {}", resource.resource_type(), expect["resourceType"]));
    }
    if let (Some(code), Resource::OperationOutcome(oo)) = (expect["issue_code"].as_str(), &resource) {
        if oo.code != code {
            return Err(format!("issue code {:?}, expected {code:?} ({})", oo.code, oo.diagnostics));
        }
    }
    Ok(())
}

/// GETs every registered function and checks its Endpoint against the
/// registry's manifest. Returns how many were checked.
pub fn check_endpoints(client: &reqwest::blocking::Client, base: &str, gw: &Gateway) -> Result<usize, String> {
    let manifests: Vec<_> = gw.registry().active_entries().map(|e| e.manifest.clone()).collect();
    for m in &manifests {
        let body = client
            .get(format!("{base}/function/{}", m.name))
            .send()
            .and_then(|r| r.text())
            .map_err(|e| e.to_string())?;
        let Ok(Resource::Endpoint(ep)) = fhir::parse_resource(&body) else {
            return Err(format!("{}: not an Endpoint: {body}", m.name));
        };
        let expected = format!("{}/function/{}", gw.config().base_url, m.name);
        if ep.address != expected || ep.name != m.name || ep.status != EndpointStatus::Active {
            return Err(format!("{}: address {} status {:?}", m.name, ep.address, ep.status));
        }
        let payload: BTreeSet<Coding> = ep.payload_type.iter().cloned().collect();
        if payload != m.input_codes {
            return Err(format!("{}: payloadType differs from the manifest input codes", m.name));
        }
    }
    Ok(manifests.len())
}

// ---- generated resources ----

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).unwrap()
}

fn id<R: Rng>(rng: &mut R) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-.";
    let n = rng.gen_range(1..=16);
    (0..n).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect()
}

fn text<R: Rng>(rng: &mut R) -> String {
    let words = ["chest pain", "Zoë", "\"quoted\"", "back\\slash", "line\nbreak", "tab\there", "ü", "日本", "ok", ""];
    (0..rng.gen_range(1..4)).map(|_| pick(rng, &words)).collect::<Vec<_>>().join(" ")
}

fn decimal<R: Rng>(rng: &mut R) -> Decimal {
    let s = match rng.gen_range(0..4) {
        0 => format!("{}", rng.gen_range(-500i32..500)),
        1 => format!("{}.{:02}", rng.gen_range(-99i32..100), rng.gen_range(0..100)),
        2 => format!("0.{:06}", rng.gen_range(0..1_000_000)),
        _ => format!("{}.{}", rng.gen_range(0..10_000), "0".repeat(rng.gen_range(1..4))),
    };
    s.parse().unwrap()
}

fn unit_decimal<R: Rng>(rng: &mut R) -> Decimal {
    format!("0.{:04}", rng.gen_range(0..10_000)).parse().unwrap()
}

fn coding<R: Rng>(rng: &mut R) -> Coding {
    let system = pick(rng, &["http://hl7.org/fhir/sid/icd-10", "https://www.cihi.ca/cci", "https://example.org/cs"]);
    Coding::new(system, id(rng))
}

fn date<R: Rng>(rng: &mut R) -> NaiveDate {
    NaiveDate::from_ymd_opt(rng.gen_range(1900..2024), rng.gen_range(1..=12), rng.gen_range(1..=28)).unwrap()
}

pub fn random_resource<R: Rng>(rng: &mut R) -> Resource {
    match rng.gen_range(0..6) {
        0 => Patient {
            id: id(rng),
            name: rng.gen_bool(0.5).then(|| text(rng)),
            gender: *[Gender::Male, Gender::Female, Gender::Other, Gender::Unknown].choose(rng).unwrap(),
            birth_date: rng.gen_bool(0.7).then(|| date(rng)),
        }
        .into(),
        1 => {
            let value = match rng.gen_range(0..4) {
                0 => None,
                1 => Some(ObservationValue::Boolean(rng.gen())),
                2 => Some(ObservationValue::String(text(rng))),
                _ => Some(ObservationValue::Quantity { value: decimal(rng), unit: pick(rng, &["mg", "1", "mmol/L"]).into() }),
            };
            let reference_range = rng.gen_bool(0.3).then(|| {
                let low = rng.gen_range(-100i32..100);
                ReferenceRange { low: low.to_string().parse().unwrap(), high: (low + rng.gen_range(0..50)).to_string().parse().unwrap() }
            });
            Observation { id: id(rng), code: coding(rng), value, reference_range, subject: rng.gen_bool(0.8).then(|| id(rng)) }
                .into()
        }
        2 => {
            let activity = (0..rng.gen_range(1..4))
                .map(|_| Activity {
                    detail: text(rng),
                    code: coding(rng),
                    probability: rng.gen_bool(0.6).then(|| unit_decimal(rng)),
                })
                .collect();
            CarePlan {
                id: id(rng),
                subject: id(rng),
                status: *[CarePlanStatus::Draft, CarePlanStatus::Active, CarePlanStatus::Completed].choose(rng).unwrap(),
                activity,
                author: rng.gen_bool(0.5).then(|| Author::new(id(rng), format!("{}.{}.0", rng.gen_range(0..5), rng.gen_range(0..10)))),
            }
            .into()
        }
        3 => {
            let name = id(rng);
            Endpoint {
                status: *[EndpointStatus::Active, EndpointStatus::Suspended, EndpointStatus::Off].choose(rng).unwrap(),
                address: format!("https://gw{}.example.org/function/{name}", rng.gen_range(0..9)),
                name,
                header: (0..rng.gen_range(0..3)).map(|_| text(rng)).collect(),
                payload_type: (0..rng.gen_range(0..4)).map(|_| coding(rng)).collect(),
            }
            .into()
        }
        4 => Subscription {
            id: id(rng),
            criteria: if rng.gen_bool(0.3) { "*".into() } else { id(rng) },
            endpoint: format!("http://hooks.example.org/{}", id(rng)),
        }
        .into(),
        _ => OperationOutcome {
            severity: *[Severity::Fatal, Severity::Error, Severity::Warning, Severity::Information].choose(rng).unwrap(),
            code: pick(rng, &["invalid", "not-found", "processing", "exception"]).into(),
            diagnostics: text(rng),
        }
        .into(),
    }
}

pub fn random_bundle<R: Rng>(rng: &mut R) -> Bundle {
    Bundle::new((0..rng.gen_range(0..8)).map(|_| random_resource(rng)).collect())
}

/// Serialize, parse, serialize: the second text must equal the first and
/// the parsed value the original.
pub fn round_trip(resource: &Resource) -> Result<(), String> {
    let first = fhir::serialize_resource(resource).map_err(|e| e.to_string())?;
    let parsed = fhir::parse_resource(&first).map_err(|e| format!("{e}: {first}"))?;
    if &parsed != resource {
        return Err(format!("parsed value differs: {first}"));
    }
    let second = fhir::serialize_resource(&parsed).map_err(|e| e.to_string())?;
    if second != first {
        return Err(format!("not a fixed point:\n{first}\n{second}"));
    }
    Ok(())
}

// ---- decision tree oracle ----

/// Label of `bits` under the tree JSON, walked directly over the JSON value.
pub fn tree_oracle(nodes: &Value, node: usize, bits: u16) -> u8 {
    let n = &nodes[node];
    if let Some(label) = n.get("label") {
        return label.as_u64().unwrap() as u8;
    }
    let feature = n["feature"].as_u64().unwrap();
    let next = if bits >> feature & 1 == 0 { &n["left"] } else { &n["right"] };
    tree_oracle(nodes, next.as_u64().unwrap() as usize, bits)
}

pub fn reference_tree_json() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/reference_tree.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

// ---- generated pipelines ----

pub const GEN_SYSTEM: &str = "https://example.org/CodeSystem/gen";

pub struct GeneratedPipeline {
    pub stages: Vec<ManifestFile>,
    pub pipeline: ManifestFile,
    pub request: Bundle,
}

fn linear_stage<R: Rng>(rng: &mut R, name: String, inputs: &[Coding], outputs: &[Coding]) -> ManifestFile {
    let outs: Vec<Value> = outputs
        .iter()
        .map(|o| {
            let weights: Vec<Value> = inputs
                .iter()
                .map(|c| json!({"system": c.system, "code": c.code, "weight": rng.gen_range(-3.0..3.0)}))
                .collect();
            json!({"system": o.system, "code": o.code, "detail": format!("do {}", o.code), "bias": rng.gen_range(-2.0..2.0), "weights": weights})
        })
        .collect();
    ManifestFile {
        name,
        version: "1.0.0".into(),
        taxonomy: Some(ModelTaxonomy::Predictive),
        input_codes: inputs.iter().cloned().collect(),
        output_codes: outputs.iter().cloned().collect(),
        memory_budget_bytes: 1 << 20,
        description: String::new(),
        handler: Some("linear-score".into()),
        parameters: json!({ "outputs": outs }),
        pipeline: None,
        scaling: None,
    }
}

/// A valid 2 or 3 stage pipeline of linear-score functions plus a request
/// that satisfies its first stage. Later stages read the previous stage's
/// outputs and, at random, earlier codes.
pub fn random_pipeline<R: Rng>(rng: &mut R, tag: usize) -> GeneratedPipeline {
    let code = |c: String| Coding::new(GEN_SYSTEM, c);
    let raw: Vec<Coding> = (0..rng.gen_range(1..=3)).map(|i| code(format!("g{tag}-in{i}"))).collect();
    let mut available = raw.clone();
    let mut previous: Vec<Coding> = Vec::new();
    let mut stages = Vec::new();
    for s in 0..rng.gen_range(2..=3) {
        let inputs: Vec<Coding> = if s == 0 {
            raw.clone()
        } else {
            let mut inputs = previous.clone();
            inputs.extend(available.iter().filter(|c| !previous.contains(c) && rng.gen_bool(0.3)).cloned());
            inputs
        };
        let outputs: Vec<Coding> = (0..rng.gen_range(1..=2)).map(|o| code(format!("g{tag}-s{s}-out{o}"))).collect();
        stages.push(linear_stage(rng, format!("g{tag}-stage{s}"), &inputs, &outputs));
        available.extend(outputs.iter().cloned());
        previous = outputs;
    }
    let pipeline = ManifestFile {
        name: format!("g{tag}-pipeline"),
        version: "1.0.0".into(),
        taxonomy: None,
        input_codes: BTreeSet::new(),
        output_codes: BTreeSet::new(),
        memory_budget_bytes: 1 << 20,
        description: String::new(),
        handler: None,
        parameters: Value::Null,
        pipeline: Some(stages.iter().map(|m| StageRef::latest(m.name.clone())).collect()),
        scaling: None,
    };
    let pid = format!("pt{tag}");
    let mut entry: Vec<Resource> = vec![Patient::new(&pid).into()];
    for (i, c) in raw.iter().enumerate() {
        let value = if rng.gen_bool(0.5) {
            ObservationValue::Boolean(rng.gen())
        } else {
            ObservationValue::Quantity { value: unit_decimal(rng), unit: "1".into() }
        };
        entry.push(Observation::new(format!("{pid}-o{i}"), c.clone()).with_value(value).with_subject(&pid).into());
    }
    GeneratedPipeline { stages, pipeline, request: Bundle::new(entry) }
}

/// Runs the stages one POST at a time, feeding each the rewrapped outputs
/// of the earlier ones, and assembles the result the way a pipeline does.
pub fn sequential_posts(gw: &Gateway, g: &GeneratedPipeline) -> Result<String, String> {
    let mut responses = Vec::new();
    for stage in &g.stages {
        let req = fhirfn_core::pipeline::stage_request(&g.request, &responses);
        let body = fhir::serialize_resource(&req.into()).unwrap();
        let reply = gw.handle_post(&stage.name, None, Some(fhir::FHIR_JSON), body.as_bytes());
        if reply.status != 200 {
            return Err(format!("{}: {} {}", stage.name, reply.status, reply.body));
        }
        match fhir::parse_resource(&reply.body) {
            Ok(Resource::Bundle(b)) => responses.push(b),
            other => return Err(format!("{}: {other:?}", stage.name)),
        }
    }
    let assembled = fhirfn_core::pipeline::assemble_response(&g.request, &responses);
    Ok(fhir::serialize_resource(&assembled.into()).unwrap())
}

/// Registers `g` on a fresh deterministic gateway and compares the pipeline
/// POST with [`sequential_posts`].
pub fn check_pipeline_equivalence(g: &GeneratedPipeline) -> Result<(), String> {
    let clock = Arc::new(LogicalClock::new());
    let gw = Gateway::builder(deterministic_config()).clock(clock).build();
    for m in g.stages.iter().chain([&g.pipeline]) {
        gw.register_file(m).map_err(|e| format!("{}: {e}", m.name))?;
    }
    let body = fhir::serialize_resource(&g.request.clone().into()).unwrap();
    let reply = gw.handle_post(&g.pipeline.name, None, Some(fhir::FHIR_JSON), body.as_bytes());
    if reply.status != 200 {
        return Err(format!("pipeline: {} {}", reply.status, reply.body));
    }
    let sequential = sequential_posts(&gw, g)?;
    if reply.body != sequential {
        return Err(format!("{}: outputs differ\n{}\n{}", g.pipeline.name, reply.body, sequential));
    }
    Ok(())
}

// ---- subscription sinks ----


/// Answers from a fixed script, then 200 forever.
pub struct ScriptedSink {
    script: Mutex<std::collections::VecDeque<Result<u16, String>>>,
    pub calls: Mutex<Vec<String>>,
}

impl ScriptedSink {
    pub fn new(script: Vec<Result<u16, String>>) -> Self {
        ScriptedSink { script: Mutex::new(script.into()), calls: Mutex::new(Vec::new()) }
    }
}

impl Sink for ScriptedSink {
    fn deliver(&self, url: &str, _content_type: &str, _body: &[u8]) -> Result<u16, String> {
        self.calls.lock().push(url.to_owned());
        self.script.lock().pop_front().unwrap_or(Ok(200))
    }
}

/// Blocks until released, then takes `delay` of logical time to answer.
pub struct SlowSink {
    pub clock: Arc<LogicalClock>,
    pub delay: std::time::Duration,
    pub gate: Mutex<std::sync::mpsc::Receiver<()>>,
}

impl Sink for SlowSink {
    fn deliver(&self, _url: &str, _content_type: &str, _body: &[u8]) -> Result<u16, String> {
        let _ = self.gate.lock().recv();
        self.clock.advance(self.delay);
        Ok(200)
    }
}

/// A request id from a reply's headers.
pub fn request_id(reply: &fhirfn_core::Reply) -> String {
    reply.header(fhirfn_core::gateway::REQUEST_ID_HEADER).unwrap().to_owned()
}

/// Request body for the reference length-of-stay function, with one
/// wildcard subscription.
pub fn subscribed_los_body(endpoint: &str) -> Vec<u8> {
    let born = NaiveDate::from_ymd_opt(1950, 3, 3).unwrap();
    let bundle = fhirfn_core::reference::los_request("ps", born, Gender::Female, &["N18"]);
    let bundle = fhirfn_core::reference::with_subscription(bundle, "sub1", "*", endpoint);
    fhir::serialize_resource(&bundle.into()).unwrap().into_bytes()
}

// ---- scaling and swap checks ----

use fhirfn_core::gateway::Slot;
use fhirfn_core::loadsim::{simulate, LoadProfile, LoadReport};
use fhirfn_core::Clock;

pub const FUNCTIONS: [&str; 3] = ["arrhythmia-classifier", "los-predictor", "los-followup"];

/// A valid request for each reference function.
pub fn reference_request(function: &str) -> Bundle {
    let born = NaiveDate::from_ymd_opt(1958, 7, 9).unwrap();
    match function {
        "arrhythmia-classifier" => fhirfn_core::reference::arrhythmia_request("pa", 0b101_0011_0101_1001),
        "los-followup" => Bundle::new(vec![
            Patient::new("pf").into(),
            Observation::new("pf-los", fhirfn_core::model::builtin::los_outcome())
                .with_value(ObservationValue::Quantity { value: "0.73".parse().unwrap(), unit: "1".into() })
                .with_subject("pf")
                .into(),
        ]),
        _ => fhirfn_core::reference::los_request("pl", born, Gender::Male, &["E11", "1HZ"]),
    }
}

/// Idle pools drain to zero, and the next request pays exactly one cold start.
pub fn check_scale_to_zero() -> Result<(), String> {
    let (gw, clock) = reference_gateway(deterministic_config());
    let cfg = ScalerConfig::default();
    for f in FUNCTIONS {
        gw.call(f, None, reference_request(f)).map_err(|e| format!("{f}: {e:?}"))?;
    }
    if gw.metrics().iter().all(|m| m.live == 0) {
        return Err("pools were never populated".into());
    }
    clock.advance(cfg.idle_timeout);
    gw.tick();
    clock.advance(cfg.tick_interval);
    gw.tick();
    if let Some(m) = gw.metrics().iter().find(|m| m.live != 0) {
        return Err(format!("{} still has {} live instances", m.function, m.live));
    }
    for f in FUNCTIONS {
        let admitted = gw.admit_bundle(f, None, reference_request(f)).map_err(|e| format!("{f}: {e:?}"))?;
        let slot = admitted.slot;
        gw.release(admitted);
        match slot {
            Slot::Ready { added_latency, .. } if added_latency == cfg.cold_start_delay => {}
            other => return Err(format!("{f}: first request after idle got {other:?}")),
        }
    }
    // And end to end: a fresh idle period, then one call costs the delay on the clock.
    clock.advance(cfg.idle_timeout + cfg.tick_interval);
    gw.tick();
    for f in FUNCTIONS {
        let t0 = clock.now();
        gw.call(f, None, reference_request(f)).map_err(|e| format!("{f}: {e:?}"))?;
        let spent = clock.now().saturating_since(t0);
        if spent != cfg.cold_start_delay {
            return Err(format!("{f}: call took {spent:?}, expected {:?}", cfg.cold_start_delay));
        }
    }
    Ok(())
}

pub fn profile(name: &str) -> LoadProfile {
    LoadProfile::from_file(&workspace().join("profiles").join(name)).unwrap()
}

pub fn check_burst() -> Result<LoadReport, String> {
    let p = profile("burst.json");
    let report = simulate(&p).map_err(|e| e.to_string())?;
    if report.arrivals != 1000 {
        return Err(format!("{} arrivals, expected 1000", report.arrivals));
    }
    let statuses: u64 = report.statuses.values().sum();
    let served: u64 = report.metrics.iter().map(|m| m.counters.served).sum();
    let rejected: u64 = report.metrics.iter().map(|m| m.counters.rejected).sum();
    if served + rejected != report.arrivals || statuses != report.arrivals {
        return Err(format!("served {served} + rejected {rejected} / statuses {statuses} vs {} arrivals", report.arrivals));
    }
    if served != report.status(200) || rejected != report.arrivals - report.status(200) {
        return Err("pool counters disagree with client statuses".into());
    }
    if rejected == 0 {
        return Err("the burst should overflow the queue".into());
    }
    if let Some(s) = report.samples.iter().find(|s| s.over_capacity().next().is_some()) {
        return Err(format!("over capacity at {} ms: {:?}", s.at_ms, s.pools));
    }
    if report.samples.is_empty() {
        return Err("no tick samples".into());
    }
    let cold: u64 = report.metrics.iter().map(|m| m.counters.cold_starts).sum();
    if cold != report.cold_admissions {
        return Err(format!("cold_starts {cold} != cold admissions {}", report.cold_admissions));
    }
    Ok(report)
}

pub fn check_swap() -> Result<LoadReport, String> {
    let report = simulate(&profile("swap.json")).map_err(|e| e.to_string())?;
    if report.arrivals != 1000 {
        return Err(format!("{} arrivals, expected 1000", report.arrivals));
    }
    if report.status(404) != 0 || report.status(503) != 0 || !report.swap_errors.is_empty() {
        return Err(format!("statuses {:?}, swap errors {:?}", report.statuses, report.swap_errors));
    }
    if report.status(200) != report.arrivals {
        return Err(format!("statuses {:?}", report.statuses));
    }
    let first_v2 = report.authors.iter().position(|a| a == "los-predictor@1.1.0").ok_or("v2 never served")?;
    if first_v2 == 0 || report.authors[..first_v2].iter().any(|a| a != "los-predictor@1.0.0") {
        return Err("v1 did not serve the first half".into());
    }
    if report.authors[first_v2..].iter().any(|a| a != "los-predictor@1.1.0") {
        return Err("author went back to v1 after the swap".into());
    }
    Ok(report)
}

/// Repeated deterministic calls of every reference function are byte-identical.
pub fn check_statelessness(repeats: usize) -> Result<(), String> {
    let (gw, _clock) = reference_gateway(deterministic_config());
    let targets = FUNCTIONS.iter().map(|f| (*f, reference_request(f))).chain([("los-pipeline", reference_request("los-predictor"))]);
    for (name, request) in targets {
        let body = fhir::serialize_resource(&request.into()).unwrap();
        let first = gw.handle_post(name, None, Some(fhir::FHIR_JSON), body.as_bytes());
        if first.status != 200 {
            return Err(format!("{name}: {} {}", first.status, first.body));
        }
        for i in 1..repeats {
            let again = gw.handle_post(name, None, Some(fhir::FHIR_JSON), body.as_bytes());
            if again.body != first.body {
                return Err(format!("{name}: call {i} differs"));
            }
        }
    }
    Ok(())
}
