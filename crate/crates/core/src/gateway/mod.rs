//! The protocol surface: discovery by GET, invocation by POST, errors as
//! OperationOutcome.
//!
//! [`Gateway`] is transport independent and driven through plain method
//! calls; [`http`] binds it to an axum router. Requests can run in one call
//! ([`Gateway::handle_post`]) or in three steps (`admit`, `execute`,
//! `release`) for callers that simulate service time themselves.

pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use chrono::NaiveDate;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock, Timestamp};
use crate::fhir::{
    self, make_operation_outcome, parse_resource_bytes, validate_bundle, Bundle, CodecError, Direction, Endpoint,
    EndpointStatus, OperationOutcome, Resource, Severity, Subscription, FHIR_JSON,
};
use crate::model::{invoke_model, InvocationContext, ManifestFile, ModelManifest};
use crate::pipeline::{self, run_pipeline, PipelineSpec};
use crate::registry::{EntryState, InFlight, Registry, RegistryError, RouteError, Target};
use crate::scaler::{render_metrics, Admission, FunctionKey, Grant, InstanceId, InstancePool, ScalerConfig, Ticket};
use crate::subscriptions::{dispatch_subscriptions, matching_subscriptions, DeliveryReport, RetryPolicy, Sink};

pub const VERSION_HEADER: &str = "X-Function-Version";
pub const REQUEST_ID_HEADER: &str = "X-Request-Id";
pub const OUTPUT_CODE_HEADER: &str = "X-Output-Code";

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind_port: u16,
    /// Public base URL used in Endpoint addresses.
    pub base_url: String,
    pub max_body_bytes: usize,
    #[serde(rename = "request_timeout_ms", with = "millis")]
    pub request_timeout: Duration,
    pub deterministic_mode: bool,
    /// Evaluation date for age features; today when unset.
    pub as_of: Option<NaiveDate>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            bind_port: 8080,
            base_url: "http://localhost:8080".into(),
            max_body_bytes: 1 << 20,
            request_timeout: Duration::from_secs(30),
            deterministic_mode: false,
            as_of: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.bind_port == 0 {
            return Err("bind_port must be in 1..=65535".into());
        }
        if self.max_body_bytes == 0 {
            return Err("max_body_bytes must be positive".into());
        }
        if fhir::absolute_url(&self.base_url).is_none() {
            return Err(format!("base_url {:?} is not an absolute URL", self.base_url));
        }
        Ok(())
    }
}

/// Discovery document for a manifest.
pub fn describe_endpoint(manifest: &ModelManifest, base_url: &str, status: EndpointStatus) -> Endpoint {
    Endpoint {
        status,
        name: manifest.name.clone(),
        address: format!("{}/function/{}", base_url.trim_end_matches('/'), manifest.name),
        header: manifest.output_codes.iter().map(|c| format!("{OUTPUT_CODE_HEADER}: {c}")).collect(),
        payload_type: manifest.input_codes.iter().cloned().collect(),
    }
}

/// A transport-neutral HTTP response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub headers: Vec<(&'static str, String)>,
    pub body: String,
}

impl Reply {
    pub fn resource(status: u16, resource: impl Into<Resource>) -> Self {
        Reply { status, content_type: FHIR_JSON, headers: Vec::new(), body: fhir::to_json(resource) }
    }

    pub fn outcome(status: u16, code: &str, diagnostics: impl Into<String>) -> Self {
        Reply::resource(status, make_operation_outcome(code, Severity::Error, diagnostics))
    }

    pub fn info(status: u16, code: &str, diagnostics: impl Into<String>) -> Self {
        Reply::resource(status, make_operation_outcome(code, Severity::Information, diagnostics))
    }

    pub fn text(status: u16, content_type: &'static str, body: String) -> Self {
        Reply { status, content_type, headers: Vec::new(), body }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// An error status with its OperationOutcome.
pub type Failure = (u16, OperationOutcome);

fn failure(status: u16, code: &str, diagnostics: impl Into<String>) -> Failure {
    (status, make_operation_outcome(code, Severity::Error, diagnostics))
}

fn failure_reply((status, outcome): Failure) -> Reply {
    Reply::resource(status, outcome)
}

pub fn registry_error_reply(e: &RegistryError) -> Reply {
    match e {
        RegistryError::DuplicateVersion { .. } => Reply::outcome(409, "duplicate", e.to_string()),
        RegistryError::NotFound(_) => Reply::outcome(404, "not-found", e.to_string()),
        RegistryError::BudgetExceeded { .. } => Reply::outcome(422, "too-costly", e.to_string()),
        RegistryError::InvalidManifest(_) => Reply::outcome(422, "invalid", e.to_string()),
        RegistryError::Snapshot(_) => Reply::outcome(500, "exception", e.to_string()),
    }
}

fn is_fhir_json(content_type: Option<&str>) -> bool {
    content_type
        .and_then(|ct| ct.split(';').next())
        .is_some_and(|media| media.trim().eq_ignore_ascii_case(FHIR_JSON))
}

/// Where an admitted request stands with respect to its instance pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Holds `instance`; `added_latency` is the cold-start delay, if any.
    Ready { instance: InstanceId, added_latency: Duration },
    Queued { ticket: Ticket },
    /// Pipelines are orchestrated in the gateway and hold no instance.
    Direct,
}

/// A request that passed routing, validation and admission.
#[derive(Debug)]
pub struct Admitted {
    pub request_id: String,
    pub key: FunctionKey,
    pub slot: Slot,
    pub request: Bundle,
    manifest: ModelManifest,
    target: Target,
    guard: InFlight,
    grant_rx: Option<mpsc::Receiver<InstanceId>>,
}

struct PoolSlot {
    pool: InstancePool,
    waiters: HashMap<Ticket, mpsc::Sender<InstanceId>>,
}

impl PoolSlot {
    fn hand_over(&mut self, grants: &[Grant]) {
        for g in grants {
            if let Some(tx) = self.waiters.remove(&g.ticket) {
                let _ = tx.send(g.instance);
            }
        }
    }
}

struct DispatchJob {
    request_id: String,
    subscriptions: Vec<Subscription>,
    body: String,
}

#[derive(Default)]
struct DeliveryBook {
    reports: Mutex<HashMap<String, DeliveryReport>>,
    done: Condvar,
    failures: Mutex<u64>,
}

pub struct Gateway {
    config: GatewayConfig,
    scaler_defaults: ScalerConfig,
    registry: RwLock<Registry>,
    pools: Mutex<BTreeMap<FunctionKey, Arc<Mutex<PoolSlot>>>>,
    clock: Arc<dyn Clock>,
    snapshot_path: Option<std::path::PathBuf>,
    deliveries: Arc<DeliveryBook>,
    dispatch_tx: Mutex<Option<mpsc::Sender<DispatchJob>>>,
    dispatcher: Mutex<Option<thread::JoinHandle<()>>>,
}

pub struct GatewayBuilder {
    config: GatewayConfig,
    scaler: ScalerConfig,
    clock: Arc<dyn Clock>,
    sink: Option<Arc<dyn Sink>>,
    retry: RetryPolicy,
    snapshot_path: Option<std::path::PathBuf>,
}

impl GatewayBuilder {
    pub fn scaler(mut self, scaler: ScalerConfig) -> Self {
        self.scaler = scaler;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn sink(mut self, sink: Arc<dyn Sink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn snapshot_path(mut self, path: impl Into<std::path::PathBuf>) -> Self {
        self.snapshot_path = Some(path.into());
        self
    }

    pub fn build(self) -> Gateway {
        let sink = self.sink.unwrap_or_else(|| Arc::new(crate::subscriptions::HttpSink::new(Duration::from_secs(10))));
        let deliveries = Arc::new(DeliveryBook::default());
        let (tx, rx) = mpsc::channel::<DispatchJob>();
        let book = Arc::clone(&deliveries);
        let clock = Arc::clone(&self.clock);
        let retry = self.retry;
        let worker = thread::Builder::new()
            .name("fhirfn-dispatch".into())
            .spawn(move || {
                for job in rx {
                    let report = dispatch_subscriptions(
                        &job.request_id,
                        &job.subscriptions,
                        &job.body,
                        sink.as_ref(),
                        clock.as_ref(),
                        &retry,
                    );
                    if report.failures() > 0 {
                        tracing::warn!(request_id = %job.request_id, failures = report.failures(), "subscription delivery failed");
                    }
                    *book.failures.lock() += report.failures() as u64;
                    book.reports.lock().insert(job.request_id, report);
                    book.done.notify_all();
                }
            })
            .expect("spawn dispatcher");
        Gateway {
            config: self.config,
            scaler_defaults: self.scaler,
            registry: RwLock::new(Registry::new()),
            pools: Mutex::new(BTreeMap::new()),
            clock: self.clock,
            snapshot_path: self.snapshot_path,
            deliveries,
            dispatch_tx: Mutex::new(Some(tx)),
            dispatcher: Mutex::new(Some(worker)),
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.dispatch_tx.lock().take();
        if let Some(worker) = self.dispatcher.lock().take() {
            let _ = worker.join();
        }
    }
}

impl Gateway {
    pub fn builder(config: GatewayConfig) -> GatewayBuilder {
        GatewayBuilder {
            config,
            scaler: ScalerConfig::default(),
            clock: Arc::new(SystemClock::new()),
            sink: None,
            retry: RetryPolicy::default(),
            snapshot_path: None,
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn registry(&self) -> parking_lot::RwLockReadGuard<'_, Registry> {
        self.registry.read()
    }

    fn context(&self) -> InvocationContext {
        let as_of = self.config.as_of.unwrap_or_else(|| chrono::Utc::now().date_naive());
        InvocationContext { as_of, deterministic: self.config.deterministic_mode }
    }

    // ---- registry ----

    pub fn register_file(&self, file: &ManifestFile) -> Result<Endpoint, RegistryError> {
        let endpoint = {
            let mut reg = self.registry.write();
            let entry = reg.register_file(file, self.clock.now())?;
            tracing::info!(function = %entry.key(), "registered");
            describe_endpoint(&entry.manifest, &self.config.base_url, entry.endpoint_status())
        };
        self.persist()?;
        Ok(endpoint)
    }

    /// Registers a function backed by a caller-supplied handler.
    pub fn register_handler(
        &self,
        manifest: ModelManifest,
        handler: Arc<dyn crate::model::Handler>,
        scaling: crate::scaler::ScalerOverrides,
    ) -> Result<Endpoint, RegistryError> {
        let mut reg = self.registry.write();
        let entry = reg.register(manifest, Target::Function(handler), scaling, None, self.clock.now())?;
        Ok(describe_endpoint(&entry.manifest, &self.config.base_url, entry.endpoint_status()))
    }

    pub fn deregister(&self, name: &str, version: &str) -> Result<EntryState, RegistryError> {
        let state = self.registry.write().deregister(name, version)?;
        tracing::info!(function = name, version, ?state, "deregistered");
        self.persist()?;
        Ok(state)
    }

    pub fn load_snapshot(&self) -> Result<usize, RegistryError> {
        match &self.snapshot_path {
            Some(path) => self.registry.write().load_snapshot(path, self.clock.now()),
            None => Ok(0),
        }
    }

    fn persist(&self) -> Result<(), RegistryError> {
        match &self.snapshot_path {
            Some(path) => self.registry.read().save_snapshot(path),
            None => Ok(()),
        }
    }

    pub fn validate_pipeline_file(&self, file: &ManifestFile) -> Reply {
        let Some(stages) = &file.pipeline else {
            return Reply::outcome(422, "invalid", "manifest has no pipeline field");
        };
        let spec = PipelineSpec { name: file.name.clone(), stages: stages.clone() };
        match pipeline::validate_pipeline(&spec, &*self.registry.read()) {
            Ok(report) if report.is_valid() => Reply::info(200, "informational", format!("pipeline {} is valid", spec.name)),
            Ok(report) => Reply::outcome(422, "invalid", report.to_string()),
            Err(e) => Reply::outcome(422, "invalid", e.to_string()),
        }
    }

    // ---- discovery ----

    pub fn handle_get(&self, name: &str) -> Reply {
        let reg = self.registry.read();
        match reg.current(name) {
            Some(e) => Reply::resource(200, describe_endpoint(&e.manifest, &self.config.base_url, e.endpoint_status())),
            None => Reply::outcome(404, "not-found", format!("no function named {name}")),
        }
    }

    pub fn list_functions(&self) -> Reply {
        Reply::resource(200, self.registry.read().list_endpoints(&self.config.base_url))
    }

    // ---- invocation ----

    /// Content-type, size, routing, parsing, validation and pool admission.
    pub fn admit(
        &self,
        name: &str,
        pin: Option<&str>,
        content_type: Option<&str>,
        body: &[u8],
    ) -> Result<Admitted, Failure> {
        if !is_fhir_json(content_type) {
            return Err(failure(
                415,
                "not-supported",
                format!("content type must be {FHIR_JSON}, got {}", content_type.unwrap_or("none")),
            ));
        }
        if body.len() > self.config.max_body_bytes {
            return Err(failure(
                413,
                "too-costly",
                format!("body of {} bytes exceeds the {}-byte limit", body.len(), self.config.max_body_bytes),
            ));
        }
        self.route(name, pin)?;
        let bundle = match parse_resource_bytes(body) {
            Ok(Resource::Bundle(b)) => b,
            Ok(other) => return Err(failure(400, "structure", format!("expected a Bundle, got {}", other.resource_type()))),
            Err(e @ CodecError::MalformedJson(_)) => return Err(failure(400, "structure", e.to_string())),
            Err(e) => return Err(failure(400, "invalid", e.to_string())),
        };
        self.admit_bundle(name, pin, bundle)
    }

    fn route(&self, name: &str, pin: Option<&str>) -> Result<(), Failure> {
        match self.registry.read().route(name, pin) {
            Ok(_) => Ok(()),
            Err(e @ (RouteError::UnknownFunction(_) | RouteError::InactiveVersion { .. })) => {
                Err(failure(404, "not-found", e.to_string()))
            }
        }
    }

    /// Admission for an already parsed request bundle.
    pub fn admit_bundle(&self, name: &str, pin: Option<&str>, request: Bundle) -> Result<Admitted, Failure> {
        let (manifest, target, guard) = {
            let reg = self.registry.read();
            let entry = reg.route(name, pin).map_err(|e| failure(404, "not-found", e.to_string()))?;
            let report = validate_bundle(&request, Direction::Inbound, &entry.manifest.input_codes, Some(self.context().as_of));
            if !report.is_valid() {
                return Err(failure(422, "processing", report.to_string()));
            }
            // Holding the read lock here makes the version switch atomic
            // with respect to admission.
            (entry.manifest.clone(), entry.target.clone(), entry.begin())
        };
        let key = FunctionKey::new(&manifest.name, &manifest.version);
        let request_id = uuid::Uuid::new_v4().to_string();
        let (slot, grant_rx) = match &target {
            Target::Pipeline(_) => (Slot::Direct, None),
            Target::Function(_) => {
                let pool = self.pool(&key);
                let mut p = pool.lock();
                match p.pool.on_request(self.clock.now()) {
                    Admission::Assigned { instance, added_latency } => (Slot::Ready { instance, added_latency }, None),
                    Admission::Queued { ticket } => {
                        let (tx, rx) = mpsc::channel();
                        p.waiters.insert(ticket, tx);
                        (Slot::Queued { ticket }, Some(rx))
                    }
                    Admission::Rejected => {
                        drop(p);
                        self.finish(guard);
                        return Err(failure(503, "overloaded", format!("{key} is at capacity and its queue is full")));
                    }
                }
            }
        };
        Ok(Admitted { request_id, key, slot, request, manifest, target, guard, grant_rx })
    }

    fn pool(&self, key: &FunctionKey) -> Arc<Mutex<PoolSlot>> {
        let mut pools = self.pools.lock();
        if let Some(p) = pools.get(key) {
            return Arc::clone(p);
        }
        let scaling = self.registry.read().entry(&key.name, &key.version).map(|e| e.scaling.clone()).unwrap_or_default();
        let config = self.scaler_defaults.with_overrides(&scaling);
        let slot = Arc::new(Mutex::new(PoolSlot { pool: InstancePool::new(key.clone(), config), waiters: HashMap::new() }));
        pools.insert(key.clone(), Arc::clone(&slot));
        slot
    }

    /// Gives a queued request the instance named in its grant.
    pub fn grant(&self, admitted: &mut Admitted, instance: InstanceId) {
        debug_assert!(matches!(admitted.slot, Slot::Queued { .. }));
        admitted.slot = Slot::Ready { instance, added_latency: Duration::ZERO };
        admitted.grant_rx = None;
    }

    /// Blocks a queued request until it is granted an instance or the
    /// request timeout passes.
    fn wait_for_instance(&self, admitted: &mut Admitted) -> Result<(), Failure> {
        let Slot::Queued { ticket } = admitted.slot else { return Ok(()) };
        let rx = admitted.grant_rx.take().expect("queued requests carry a receiver");
        match rx.recv_timeout(self.config.request_timeout) {
            Ok(instance) => {
                self.grant(admitted, instance);
                Ok(())
            }
            Err(_) => {
                let pool = self.pool(&admitted.key);
                let mut p = pool.lock();
                if p.pool.cancel(ticket) {
                    p.waiters.remove(&ticket);
                    return Err(failure(504, "timeout", format!("no {} instance became free in time", admitted.key)));
                }
                // Granted between the timeout and the cancel.
                drop(p);
                let instance = rx.try_recv().expect("a dequeued ticket has been granted");
                self.grant(admitted, instance);
                Ok(())
            }
        }
    }

    /// Runs the admitted request's handler or pipeline.
    pub fn execute(&self, admitted: &Admitted) -> Result<Bundle, Failure> {
        match &admitted.target {
            Target::Function(handler) => {
                invoke_model(&admitted.manifest, handler.as_ref(), &admitted.request, &self.context())
                    .map_err(|e| (500, e.to_outcome()))
            }
            Target::Pipeline(spec) => run_pipeline(spec, &admitted.request, |_, stage, req| {
                self.call(&stage.function, stage.version.as_deref(), req.clone()).map(|(bundle, _)| bundle)
            })
            .map_err(|f| (f.status, f.outcome)),
        }
    }

    /// Frees the request's instance and in-flight mark. Returns the grants
    /// this released, which blocked callers have already been handed.
    pub fn release(&self, admitted: Admitted) -> Vec<Grant> {
        let mut grants = Vec::new();
        match admitted.slot {
            Slot::Ready { instance, .. } => {
                let pool = self.pool(&admitted.key);
                let mut p = pool.lock();
                if let Some(g) = p.pool.on_complete(instance, self.clock.now()) {
                    grants.push(g);
                }
                p.hand_over(&grants);
            }
            Slot::Queued { ticket } => {
                let pool = self.pool(&admitted.key);
                let mut p = pool.lock();
                p.pool.cancel(ticket);
                p.waiters.remove(&ticket);
            }
            Slot::Direct => {}
        }
        self.finish(admitted.guard);
        grants
    }

    fn finish(&self, guard: InFlight) {
        if guard.finish() {
            self.registry.write().reap();
        }
    }

    /// Blocking invocation of a parsed bundle; returns the response and the
    /// version that served it.
    pub fn call(&self, name: &str, pin: Option<&str>, request: Bundle) -> Result<(Bundle, String), Failure> {
        let admitted = self.admit_bundle(name, pin, request)?;
        self.run_admitted(admitted)
    }

    fn run_admitted(&self, mut admitted: Admitted) -> Result<(Bundle, String), Failure> {
        if let Err(f) = self.wait_for_instance(&mut admitted) {
            self.release(admitted);
            return Err(f);
        }
        if let Slot::Ready { added_latency, .. } = admitted.slot {
            if !added_latency.is_zero() {
                self.clock.sleep(added_latency);
            }
        }
        let result = self.execute(&admitted);
        let version = admitted.key.version.clone();
        self.release(admitted);
        result.map(|b| (b, version))
    }

    /// Full POST handling. Matching subscriptions are dispatched after the
    /// response is built, on the background worker.
    pub fn handle_post(&self, name: &str, pin: Option<&str>, content_type: Option<&str>, body: &[u8]) -> Reply {
        let admitted = match self.admit(name, pin, content_type, body) {
            Ok(a) => a,
            Err(f) => return failure_reply(f),
        };
        let request_id = admitted.request_id.clone();
        let subscriptions: Vec<Subscription> = admitted.request.subscriptions().cloned().collect();
        let (response, version) = match self.run_admitted(admitted) {
            Ok(r) => r,
            Err(f) => {
                let mut reply = failure_reply(f);
                reply.headers.push((REQUEST_ID_HEADER, request_id));
                return reply;
            }
        };
        let mut reply = Reply::resource(200, response.clone());
        reply.headers.push((REQUEST_ID_HEADER, request_id.clone()));
        reply.headers.push((VERSION_HEADER, version));
        let request = Bundle::new(subscriptions.into_iter().map(Resource::from).collect());
        let matched: Vec<Subscription> = matching_subscriptions(&request, &response).into_iter().cloned().collect();
        if !matched.is_empty() {
            self.enqueue_dispatch(DispatchJob { request_id, subscriptions: matched, body: reply.body.clone() });
        }
        reply
    }

    fn enqueue_dispatch(&self, job: DispatchJob) {
        self.deliveries.reports.lock().insert(
            job.request_id.clone(),
            DeliveryReport { request_id: job.request_id.clone(), complete: false, deliveries: Vec::new() },
        );
        if let Some(tx) = self.dispatch_tx.lock().as_ref() {
            let _ = tx.send(job);
        }
    }

    pub fn delivery_report(&self, request_id: &str) -> Option<DeliveryReport> {
        self.deliveries.reports.lock().get(request_id).cloned()
    }

    /// Waits (in wall time) until the report for `request_id` is complete.
    pub fn wait_for_delivery(&self, request_id: &str, timeout: Duration) -> Option<DeliveryReport> {
        let deadline = std::time::Instant::now() + timeout;
        let mut reports = self.deliveries.reports.lock();
        loop {
            match reports.get(request_id) {
                Some(r) if r.complete => return Some(r.clone()),
                None => return None,
                Some(_) => {}
            }
            if self.deliveries.done.wait_until(&mut reports, deadline).timed_out() {
                return reports.get(request_id).cloned();
            }
        }
    }

    pub fn handle_deliveries(&self, request_id: &str) -> Reply {
        match self.delivery_report(request_id) {
            Some(r) => Reply::text(200, "application/json", serde_json::to_string(&r).expect("report serializes")),
            None => Reply::outcome(404, "not-found", format!("no deliveries recorded for request {request_id}")),
        }
    }

    // ---- scaling ----

    /// Drives every pool's timers and retires drained registry entries.
    /// Returns the grants issued, keyed by pool.
    pub fn tick(&self) -> Vec<(FunctionKey, Grant)> {
        let now = self.clock.now();
        let pools: Vec<_> = self.pools.lock().iter().map(|(k, p)| (k.clone(), Arc::clone(p))).collect();
        let mut grants = Vec::new();
        for (key, pool) in pools {
            let mut p = pool.lock();
            let out = p.pool.on_tick(now);
            p.hand_over(&out.grants);
            grants.extend(out.grants.into_iter().map(|g| (key.clone(), g)));
        }
        self.registry.write().reap();
        grants
    }

    pub fn metrics(&self) -> Vec<crate::scaler::MetricsSnapshot> {
        self.pools.lock().values().map(|p| p.lock().pool.metrics()).collect()
    }

    pub fn metrics_text(&self) -> String {
        let mut text = render_metrics(&self.metrics());
        text.push_str(&format!("subscription_failures_total {}\n", *self.deliveries.failures.lock()));
        text
    }

    pub fn tick_interval(&self) -> Duration {
        self.scaler_defaults.tick_interval
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::fhir::{parse_resource, Coding, Observation, Patient};
    use crate::model::{wrap_careplan, Handler, HandlerFault, ModelTaxonomy};
    use crate::scaler::ScalerOverrides;

    fn manifest(name: &str, version: &str) -> ModelManifest {
        ModelManifest {
            name: name.into(),
            version: version.into(),
            taxonomy: ModelTaxonomy::Predictive,
            input_codes: [Coding::new("s", "in")].into(),
            output_codes: [Coding::new("s", "out")].into(),
            memory_budget_bytes: 1,
            description: String::new(),
        }
    }

    fn scorer() -> Arc<dyn Handler> {
        Arc::new(|_: &InvocationContext, req: &Bundle| -> Result<Bundle, HandlerFault> {
            let p = req.patients().next().unwrap().clone();
            let plan = wrap_careplan(0.5, &Coding::new("s", "out"), &p.id, &crate::fhir::Author::new("x", "0.0.0"));
            Ok(Bundle::new(vec![p.into(), plan.into()]))
        })
    }

    fn gateway(clock: Arc<LogicalClock>) -> Gateway {
        let config = GatewayConfig { deterministic_mode: true, as_of: NaiveDate::from_ymd_opt(2020, 1, 1), ..Default::default() };
        let g = Gateway::builder(config).clock(clock).build();
        g.register_handler(manifest("f", "1.0.0"), scorer(), ScalerOverrides::default()).unwrap();
        g
    }

    fn body() -> Vec<u8> {
        let b = Bundle::new(vec![
            Patient::new("p1").into(),
            Observation::new("o1", Coding::new("s", "in")).with_subject("p1").into(),
        ]);
        fhir::to_json(b).into_bytes()
    }

    #[test]
    fn endpoint_mapping() {
        let e = describe_endpoint(&manifest("a", "1.0.0"), "http://h:8080/", EndpointStatus::Suspended);
        assert_eq!(e.address, "http://h:8080/function/a");
        assert_eq!(e.payload_type, [Coding::new("s", "in")]);
        assert_eq!(e.header, ["X-Output-Code: s|out"]);
        assert_eq!(e.status, EndpointStatus::Suspended);
    }

    #[test]
    fn status_table() {
        let g = gateway(Arc::new(LogicalClock::new()));
        let cases: Vec<(&str, Option<&str>, Vec<u8>, u16)> = vec![
            ("f", Some("text/plain"), body(), 415),
            ("f", None, body(), 415),
            ("nope", Some(FHIR_JSON), body(), 404),
            ("f", Some(FHIR_JSON), b"{".to_vec(), 400),
            ("f", Some(FHIR_JSON), br#"{"resourceType":"Patient","id":"p"}"#.to_vec(), 400),
            ("f", Some(FHIR_JSON), br#"{"resourceType":"Bundle","type":"collection"}"#.to_vec(), 422),
            ("f", Some(FHIR_JSON), vec![b' '; (1 << 20) + 1], 413),
            ("f", Some("application/fhir+json; charset=utf-8"), body(), 200),
        ];
        for (name, ct, b, status) in cases {
            let r = g.handle_post(name, None, ct, &b);
            assert_eq!(r.status, status, "{name} {ct:?}: {}", r.body);
            let parsed = parse_resource(&r.body).unwrap();
            if status != 200 {
                assert!(matches!(parsed, Resource::OperationOutcome(_)));
            }
        }
    }

    #[test]
    fn cold_start_then_warm() {
        let clock = Arc::new(LogicalClock::new());
        let g = gateway(Arc::clone(&clock));
        assert_eq!(g.handle_post("f", None, Some(FHIR_JSON), &body()).status, 200);
        assert_eq!(clock.now().as_millis(), 500);
        assert_eq!(g.handle_post("f", None, Some(FHIR_JSON), &body()).status, 200);
        assert_eq!(clock.now().as_millis(), 500);
        let m = &g.metrics()[0];
        assert_eq!((m.live, m.counters.cold_starts, m.counters.served), (1, 1, 2));
    }

    #[test]
    fn get_has_no_side_effects() {
        let g = gateway(Arc::new(LogicalClock::new()));
        let before = g.metrics_text();
        assert_eq!(g.handle_get("f").status, 200);
        assert_eq!(g.handle_get("nope").status, 404);
        assert_eq!(g.metrics_text(), before);
    }

    #[test]
    fn full_queue_rejects_with_503() {
        let clock = Arc::new(LogicalClock::new());
        let config = GatewayConfig::default();
        let g = Gateway::builder(config)
            .clock(clock)
            .scaler(ScalerConfig { max_instances: 1, queue_capacity: 0, ..Default::default() })
            .build();
        g.register_handler(manifest("f", "1.0.0"), scorer(), ScalerOverrides::default()).unwrap();
        let held = g.admit("f", None, Some(FHIR_JSON), &body()).unwrap();
        let r = g.handle_post("f", None, Some(FHIR_JSON), &body());
        assert_eq!(r.status, 503);
        assert!(r.body.contains("overloaded"));
        g.release(held);
    }

    #[test]
    fn queued_request_times_out_with_504() {
        let config = GatewayConfig { request_timeout: Duration::from_millis(20), ..Default::default() };
        let g = Gateway::builder(config)
            .clock(Arc::new(LogicalClock::new()))
            .scaler(ScalerConfig { max_instances: 1, queue_capacity: 1, ..Default::default() })
            .build();
        g.register_handler(manifest("f", "1.0.0"), scorer(), ScalerOverrides::default()).unwrap();
        let held = g.admit("f", None, Some(FHIR_JSON), &body()).unwrap();
        let r = g.handle_post("f", None, Some(FHIR_JSON), &body());
        assert_eq!(r.status, 504);
        assert!(r.body.contains("timeout"));
        assert_eq!(g.metrics()[0].queued, 0);
        g.release(held);
        assert_eq!(g.metrics()[0].counters.rejected, 1);
    }

    #[test]
    fn pinned_version_routes_or_404s() {
        let g = gateway(Arc::new(LogicalClock::new()));
        let r = g.handle_post("f", Some("1.0.0"), Some(FHIR_JSON), &body());
        assert_eq!(r.header(VERSION_HEADER), Some("1.0.0"));
        assert_eq!(g.handle_post("f", Some("9.9.9"), Some(FHIR_JSON), &body()).status, 404);
    }

    #[test]
    fn handler_fault_is_500() {
        let g = gateway(Arc::new(LogicalClock::new()));
        let boom: Arc<dyn Handler> =
            Arc::new(|_: &InvocationContext, _: &Bundle| -> Result<Bundle, HandlerFault> { Err(HandlerFault("boom".into())) });
        g.register_handler(manifest("f", "2.0.0"), boom, ScalerOverrides::default()).unwrap();
        let r = g.handle_post("f", None, Some(FHIR_JSON), &body());
        assert_eq!(r.status, 500);
        assert!(r.body.contains("exception"));
    }
}
