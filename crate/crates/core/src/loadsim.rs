//! Discrete-event load harness.
//!
//! Replays an arrival profile against an in-process [`Gateway`] on a
//! [`LogicalClock`]: arrivals, completions, scaler ticks and version swaps
//! are events on one timeline, so runs are exactly reproducible.
//!
//! Profile file:
//!
//! ```json
//! {
//!   "function": "los-predictor",
//!   "request": "requests/los.json",
//!   "service_time_ms": 50,
//!   "phases": [{ "start_ms": 0, "duration_ms": 10000, "rate": 100 }],
//!   "swaps": [{ "at_ms": 5000, "manifest": "los-predictor-v2.json" }],
//!   "scaler": { "max_instances": 8 }
//! }
//! ```
//!
//! `request`, `manifests` and swap `manifest` take a path (relative to the
//! profile) or an inline JSON document. Without `manifests` the reference
//! manifests are registered.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, LogicalClock, Timestamp};
use crate::fhir::{self, parse_resource, Bundle, Resource, FHIR_JSON};
use crate::gateway::{Admitted, Gateway, GatewayConfig, Slot};
use crate::model::ManifestFile;
use crate::registry::Target;
use crate::scaler::{FunctionKey, Grant, MetricsSnapshot, ScalerConfig};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub start_ms: u64,
    pub duration_ms: u64,
    /// Arrivals per second, evenly spaced.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(PathBuf),
    Inline(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapSpec {
    pub at_ms: u64,
    pub manifest: Source<ManifestFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub function: String,
    pub request: Source<serde_json::Value>,
    pub service_time_ms: u64,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub swaps: Vec<SwapSpec>,
    #[serde(default)]
    pub manifests: Option<Vec<Source<ManifestFile>>>,
    #[serde(default)]
    pub scaler: ScalerConfig,
    /// Simulated time after the last phase ends; defaults to
    /// idle_timeout + 2 ticks so pools can drain to zero.
    #[serde(default)]
    pub settle_ms: Option<u64>,
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
}

/// A profile with every file reference resolved.
#[derive(Debug, Clone)]
pub struct LoadProfile {
    pub function: String,
    pub request: Bundle,
    pub service_time: Duration,
    pub phases: Vec<Phase>,
    pub swaps: Vec<(u64, ManifestFile)>,
    pub manifests: Vec<ManifestFile>,
    pub scaler: ScalerConfig,
    pub settle: Duration,
    pub as_of: NaiveDate,
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|e| LoadError::Read { path: path.to_owned(), message: e.to_string() })
}

fn manifest_from(source: &Source<ManifestFile>, base: &Path) -> Result<ManifestFile, LoadError> {
    match source {
        Source::Inline(m) => Ok(m.clone()),
        Source::Path(p) => {
            let path = base.join(p);
            ManifestFile::from_json(&read(&path)?).map_err(|e| LoadError::Read { path, message: e.to_string() })
        }
    }
}

impl LoadProfile {
    pub fn from_file(path: &Path) -> Result<Self, LoadError> {
        let text = read(path)?;
        let file: ProfileFile =
            serde_json::from_str(&text).map_err(|e| LoadError::Read { path: path.to_owned(), message: e.to_string() })?;
        Self::resolve(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(file: ProfileFile, base: &Path) -> Result<Self, LoadError> {
        let request_value = match &file.request {
            Source::Inline(v) => v.clone(),
            Source::Path(p) => {
                let path = base.join(p);
                serde_json::from_str(&read(&path)?).map_err(|e| LoadError::Read { path, message: e.to_string() })?
            }
        };
        let request = match fhir::from_value(&request_value) {
            Ok(Resource::Bundle(b)) => b,
            Ok(other) => return Err(LoadError::Invalid(format!("request is a {}, not a Bundle", other.resource_type()))),
            Err(e) => return Err(LoadError::Invalid(format!("request: {e}"))),
        };
        let manifests = match &file.manifests {
            Some(list) => list.iter().map(|s| manifest_from(s, base)).collect::<Result<_, _>>()?,
            None => crate::reference::reference_manifests(),
        };
        let swaps = file
            .swaps
            .iter()
            .map(|s| Ok((s.at_ms, manifest_from(&s.manifest, base)?)))
            .collect::<Result<_, LoadError>>()?;
        file.scaler.validate().map_err(|e| LoadError::Invalid(e.to_string()))?;
        if file.phases.is_empty() {
            return Err(LoadError::Invalid("at least one phase is required".into()));
        }
        if let Some(p) = file.phases.iter().find(|p| !(p.rate.is_finite() && p.rate > 0.0)) {
            return Err(LoadError::Invalid(format!("phase at {} ms has a non-positive rate", p.start_ms)));
        }
        let settle = file
            .settle_ms
            .map(Duration::from_millis)
            .unwrap_or(file.scaler.idle_timeout + file.scaler.tick_interval * 2);
        Ok(LoadProfile {
            function: file.function,
            request,
            service_time: Duration::from_millis(file.service_time_ms),
            phases: file.phases,
            swaps,
            manifests,
            scaler: file.scaler,
            settle,
            as_of: file.as_of.unwrap_or_else(|| NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")),
        })
    }

    /// Arrival times in ms, sorted. Phase `p` yields arrivals at
    /// `start + round(k * 1000 / rate)` for every such time before its end.
    pub fn arrivals(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for p in &self.phases {
            let mut k = 0u64;
            loop {
                let offset = (k as f64 * 1000.0 / p.rate).round() as u64;
                if offset >= p.duration_ms {
                    break;
                }
                out.push(p.start_ms + offset);
                k += 1;
            }
        }
        out.sort_unstable();
        out
    }

    fn end_ms(&self) -> u64 {
        self.phases.iter().map(|p| p.start_ms + p.duration_ms).max().unwrap_or(0)
    }
}

/// Gauges after one scaler tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TickSample {
    pub at_ms: u64,
    pub pools: Vec<(FunctionKey, u32, u32)>,
}

impl TickSample {
    /// `(function, live, max_instances)` triples that break the bound.
    pub fn over_capacity(&self) -> impl Iterator<Item = &(FunctionKey, u32, u32)> {
        self.pools.iter().filter(|(_, live, max)| live > max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadReport {
    pub arrivals: u64,
    /// Responses by HTTP status.
    pub statuses: BTreeMap<u16, u64>,
    /// End-to-end latency of each 200 response, in arrival order.
    pub latencies_ms: Vec<u64>,
    /// `name@version` of the CarePlan author of each 200 response, in
    /// arrival order.
    pub authors: Vec<String>,
    /// Admissions that started a new instance, as seen by the harness.
    pub cold_admissions: u64,
    pub swap_errors: Vec<String>,
    pub samples: Vec<TickSample>,
    pub metrics: Vec<MetricsSnapshot>,
    pub end_ms: u64,
}

impl LoadReport {
    pub fn status(&self, code: u16) -> u64 {
        self.statuses.get(&code).copied().unwrap_or(0)
    }

    /// Nearest-rank percentile of the 200-response latencies.
    pub fn percentile(&self, p: f64) -> Option<u64> {
        let mut sorted = self.latencies_ms.clone();
        sorted.sort_unstable();
        percentile(&sorted, p)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>4} {:>6} {:>7} {:>9} {:>11} {:>9} {:>11}",
            "function", "max", "live", "queued", "served", "cold_starts", "rejected", "scale_downs"
        );
        for m in &self.metrics {
            let c = &m.counters;
            let _ = writeln!(
                out,
                "{:<28} {:>4} {:>6} {:>7} {:>9} {:>11} {:>9} {:>11}",
                m.function.to_string(),
                m.max_instances,
                m.live,
                m.queued,
                c.served,
                c.cold_starts,
                c.rejected,
                c.scale_downs
            );
        }
        let _ = writeln!(out);
        let statuses: Vec<String> = self.statuses.iter().map(|(s, n)| format!("{s}={n}")).collect();
        let _ = writeln!(out, "arrivals {}  statuses {}", self.arrivals, statuses.join(" "));
        let pct = |p| self.percentile(p).map_or("-".to_owned(), |v| v.to_string());
        let _ = writeln!(
            out,
            "latency_ms p50 {}  p90 {}  p99 {}  max {}",
            pct(50.0),
            pct(90.0),
            pct(99.0),
            pct(100.0)
        );
        for m in &self.metrics {
            let labels = format!("{{function=\"{}\",version=\"{}\"}}", m.function.name, m.function.version);
            let _ = writeln!(out, "cold_starts_total{labels} {}", m.counters.cold_starts);
        }
        out
    }
}

pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

// Same-instant ordering: completions free instances first, then swaps,
// then ticks, then new arrivals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Completion(usize),
    Swap(usize),
    Tick,
    Arrival(usize),
}

struct InFlight {
    seq: usize,
    arrived_ms: u64,
    admitted: Admitted,
    status: u16,
    author: Option<String>,
}

struct Sim<'a> {
    gw: &'a Gateway,
    clock: &'a LogicalClock,
    service: Duration,
    events: BinaryHeap<Reverse<(u64, Event, u64)>>,
    next_event: u64,
    running: HashMap<usize, InFlight>,
    queued: HashMap<(FunctionKey, u64), (usize, u64, Admitted)>,
    next_run: usize,
    results: Vec<(usize, u16, Option<u64>, Option<String>)>,
    cold_admissions: u64,
}

impl Sim<'_> {
    fn schedule(&mut self, at: u64, event: Event) {
        self.events.push(Reverse((at, event, self.next_event)));
        self.next_event += 1;
    }

    fn now(&self) -> u64 {
        self.clock.now().as_millis()
    }

    /// Executes a request that holds an instance and schedules its end.
    fn start(&mut self, seq: usize, arrived_ms: u64, admitted: Admitted) {
        let latency = match admitted.slot {
            Slot::Ready { added_latency, .. } => added_latency,
            _ => Duration::ZERO,
        };
        let (status, author) = match self.gw.execute(&admitted) {
            Ok(bundle) => (200, bundle.care_plans().next().and_then(|p| p.author.as_ref()).map(ToString::to_string)),
            Err((status, _)) => (status, None),
        };
        let id = self.next_run;
        self.next_run += 1;
        let done = self.now() + (latency + self.service).as_millis() as u64;
        self.running.insert(id, InFlight { seq, arrived_ms, admitted, status, author });
        self.schedule(done, Event::Completion(id));
    }

    fn apply_grants(&mut self, grants: Vec<(FunctionKey, Grant)>) {
        for (key, g) in grants {
            if let Some((seq, arrived, mut admitted)) = self.queued.remove(&(key, g.ticket)) {
                self.gw.grant(&mut admitted, g.instance);
                self.start(seq, arrived, admitted);
            }
        }
    }

    fn arrive(&mut self, seq: usize, function: &str, body: &[u8]) {
        let now = self.now();
        match self.gw.admit(function, None, Some(FHIR_JSON), body) {
            Err((status, _)) => self.results.push((seq, status, None, None)),
            Ok(admitted) => match admitted.slot {
                Slot::Queued { ticket } => {
                    self.queued.insert((admitted.key.clone(), ticket), (seq, now, admitted));
                }
                Slot::Ready { added_latency, .. } => {
                    if !added_latency.is_zero() {
                        self.cold_admissions += 1;
                    }
                    self.start(seq, now, admitted);
                }
                Slot::Direct => self.start(seq, now, admitted),
            },
        }
    }

    fn complete(&mut self, id: usize) {
        let run = self.running.remove(&id).expect("scheduled completion");
        let latency = self.now() - run.arrived_ms;
        self.results.push((run.seq, run.status, Some(latency), run.author));
        let key = run.admitted.key.clone();
        let grants = self.gw.release(run.admitted);
        self.apply_grants(grants.into_iter().map(|g| (key.clone(), g)).collect());
    }
}

/// Runs `profile` to completion and reports what the scaler and clients saw.
pub fn simulate(profile: &LoadProfile) -> Result<LoadReport, LoadError> {
    let clock = Arc::new(LogicalClock::new());
    let config = GatewayConfig { deterministic_mode: true, as_of: Some(profile.as_of), ..Default::default() };
    let gw = Gateway::builder(config).clock(clock.clone()).scaler(profile.scaler.clone()).build();
    for m in &profile.manifests {
        gw.register_file(m).map_err(|e| LoadError::Invalid(format!("registering {}: {e}", m.name)))?;
    }
    if let Some(entry) = gw.registry().active(&profile.function) {
        if matches!(entry.target, Target::Pipeline(_)) {
            return Err(LoadError::Invalid(format!("{} is a pipeline; load profiles drive functions", profile.function)));
        }
    }
    let body = fhir::to_json(profile.request.clone()).into_bytes();
    // The request must be acceptable on its own, or every arrival would be
    // a 4xx and the run would say nothing about scaling.
    parse_resource(std::str::from_utf8(&body).expect("utf-8")).map_err(|e| LoadError::Invalid(e.to_string()))?;

    let arrivals = profile.arrivals();
    let mut sim = Sim {
        gw: &gw,
        clock: &clock,
        service: profile.service_time,
        events: BinaryHeap::new(),
        next_event: 0,
        running: HashMap::new(),
        queued: HashMap::new(),
        next_run: 0,
        results: Vec::new(),
        cold_admissions: 0,
    };
    for (seq, &t) in arrivals.iter().enumerate() {
        sim.schedule(t, Event::Arrival(seq));
    }
    for (i, (at, _)) in profile.swaps.iter().enumerate() {
        sim.schedule(*at, Event::Swap(i));
    }
    let tick = profile.scaler.tick_interval.as_millis() as u64;
    let horizon = profile.end_ms() + profile.settle.as_millis() as u64;
    sim.schedule(tick, Event::Tick);

    let mut samples = Vec::new();
    let mut swap_errors = Vec::new();
    while let Some(Reverse((at, event, _))) = sim.events.pop() {
        clock.set(Timestamp::from_millis(at));
        match event {
            Event::Arrival(seq) => sim.arrive(seq, &profile.function, &body),
            Event::Completion(id) => sim.complete(id),
            Event::Swap(i) => {
                if let Err(e) = gw.register_file(&profile.swaps[i].1) {
                    swap_errors.push(format!("{} at {at} ms: {e}", profile.swaps[i].1.name));
                }
            }
            Event::Tick => {
                let grants = gw.tick();
                sim.apply_grants(grants);
                samples.push(TickSample {
                    at_ms: at,
                    pools: gw.metrics().into_iter().map(|m| (m.function, m.live, m.max_instances)).collect(),
                });
                if at + tick <= horizon || !sim.running.is_empty() || !sim.queued.is_empty() {
                    sim.schedule(at + tick, Event::Tick);
                }
            }
        }
    }

    let mut results = std::mem::take(&mut sim.results);
    results.sort_by_key(|r| r.0);
    let mut statuses = BTreeMap::new();
    let mut latencies_ms = Vec::new();
    let mut authors = Vec::new();
    for (_, status, latency, author) in results {
        *statuses.entry(status).or_insert(0) += 1;
        if status == 200 {
            latencies_ms.extend(latency);
            authors.extend(author);
        }
    }
    let cold_admissions = sim.cold_admissions;
    let mut metrics = gw.metrics();
    metrics.sort_by(|a, b| a.function.cmp(&b.function));
    Ok(LoadReport {
        arrivals: arrivals.len() as u64,
        statuses,
        latencies_ms,
        authors,
        cold_admissions,
        swap_errors,
        samples,
        metrics,
        end_ms: clock.now().as_millis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fhir::Gender;
    use crate::reference::los_request;

    fn profile(phases: Vec<Phase>, scaler: ScalerConfig) -> LoadProfile {
        let request = los_request("p1", NaiveDate::from_ymd_opt(1960, 3, 3).unwrap(), Gender::Male, &["I50"]);
        let file = ProfileFile {
            function: "los-predictor".into(),
            request: Source::Inline(serde_json::from_str(&fhir::to_json(request)).unwrap()),
            service_time_ms: 50,
            phases,
            swaps: Vec::new(),
            manifests: None,
            scaler,
            settle_ms: None,
            as_of: None,
        };
        LoadProfile::resolve(file, Path::new(".")).unwrap()
    }

    #[test]
    fn arrivals_are_evenly_spaced() {
        let p = profile(vec![Phase { start_ms: 100, duration_ms: 1000, rate: 4.0 }], ScalerConfig::default());
        assert_eq!(p.arrivals(), [100, 350, 600, 850]);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&v, 100.0), Some(100));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn steady_load_is_all_served_and_scales_to_zero() {
        let p = profile(vec![Phase { start_ms: 0, duration_ms: 2000, rate: 10.0 }], ScalerConfig::default());
        let r = simulate(&p).unwrap();
        assert_eq!(r.arrivals, 20);
        assert_eq!(r.status(200), 20);
        // Arrivals inside the first cold start each start an instance.
        assert_eq!(r.cold_admissions, 6);
        let m = &r.metrics.iter().find(|m| m.function.name == "los-predictor").unwrap();
        assert_eq!(m.live, 0);
        assert_eq!(m.counters.cold_starts, r.cold_admissions);
        assert!(r.render().contains("cold_starts_total{function=\"los-predictor\",version=\"1.0.0\"}"));
    }

    #[test]
    fn pipelines_are_refused() {
        let mut p = profile(vec![Phase { start_ms: 0, duration_ms: 10, rate: 1.0 }], ScalerConfig::default());
        p.function = "los-pipeline".into();
        assert!(matches!(simulate(&p), Err(LoadError::Invalid(_))));
    }
}
