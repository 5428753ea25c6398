//! Simulated serverless runtime: per-function instance pools that scale
//! from zero on demand, charge a cold-start delay for every new instance,
//! queue when saturated and retire idle instances.
//!
//! Pools are plain state machines driven by explicit timestamps; callers
//! own the clock.

use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionKey {
    pub name: String,
    pub version: String,
}

impl FunctionKey {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        FunctionKey { name: name.into(), version: version.into() }
    }
}

impl fmt::Display for FunctionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScalerError {
    #[error("max_instances must be at least 1")]
    NoInstances,
    #[error("{0} must be positive")]
    ZeroDuration(&'static str),
}

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
pub struct ScalerConfig {
    pub max_instances: u32,
    #[serde(rename = "idle_timeout_ms", with = "millis")]
    pub idle_timeout: Duration,
    #[serde(rename = "cold_start_delay_ms", with = "millis")]
    pub cold_start_delay: Duration,
    pub queue_capacity: u32,
    #[serde(rename = "tick_interval_ms", with = "millis")]
    pub tick_interval: Duration,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            max_instances: 8,
            idle_timeout: Duration::from_secs(30),
            cold_start_delay: Duration::from_millis(500),
            queue_capacity: 16,
            tick_interval: Duration::from_secs(1),
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<(), ScalerError> {
        if self.max_instances == 0 {
            return Err(ScalerError::NoInstances);
        }
        for (name, d) in [
            ("idle_timeout", self.idle_timeout),
            ("cold_start_delay", self.cold_start_delay),
            ("tick_interval", self.tick_interval),
        ] {
            if d.is_zero() {
                return Err(ScalerError::ZeroDuration(name));
            }
        }
        Ok(())
    }

    pub fn with_overrides(&self, o: &ScalerOverrides) -> ScalerConfig {
        ScalerConfig {
            max_instances: o.max_instances.unwrap_or(self.max_instances),
            idle_timeout: o.idle_timeout_ms.map_or(self.idle_timeout, Duration::from_millis),
            cold_start_delay: o.cold_start_delay_ms.map_or(self.cold_start_delay, Duration::from_millis),
            queue_capacity: o.queue_capacity.unwrap_or(self.queue_capacity),
            tick_interval: o.tick_interval_ms.map_or(self.tick_interval, Duration::from_millis),
        }
    }
}

/// Per-function overrides of the scaler defaults, as written in manifests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_instances: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cold_start_delay_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick_interval_ms: Option<u64>,
}

pub type InstanceId = u64;
pub type Ticket = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InstanceState {
    Idle { since: Timestamp },
    Busy,
}

#[derive(Debug, Clone)]
struct Instance {
    id: InstanceId,
    state: InstanceState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    /// Runs on `instance` after `added_latency` (non-zero only for a cold start).
    Assigned { instance: InstanceId, added_latency: Duration },
    /// Waits for an instance; resolved later by a [`Grant`].
    Queued { ticket: Ticket },
    Rejected,
}

/// A queued request handed an instance that became free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub ticket: Ticket,
    pub instance: InstanceId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub grants: Vec<Grant>,
    pub retired: Vec<InstanceId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub arrivals: u64,
    pub served: u64,
    pub cold_starts: u64,
    pub rejected: u64,
    pub scale_downs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub function: FunctionKey,
    pub max_instances: u32,
    pub live: u32,
    pub busy: u32,
    pub queued: u32,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct InstancePool {
    function: FunctionKey,
    config: ScalerConfig,
    instances: Vec<Instance>,
    queue: VecDeque<Ticket>,
    next_instance: InstanceId,
    next_ticket: Ticket,
    counters: Counters,
}

impl InstancePool {
    pub fn new(function: FunctionKey, config: ScalerConfig) -> Self {
        InstancePool {
            function,
            config,
            instances: Vec::new(),
            queue: VecDeque::new(),
            next_instance: 0,
            next_ticket: 0,
            counters: Counters::default(),
        }
    }

    pub fn config(&self) -> &ScalerConfig {
        &self.config
    }

    pub fn live(&self) -> u32 {
        self.instances.len() as u32
    }

    pub fn queued(&self) -> u32 {
        self.queue.len() as u32
    }

    pub fn busy(&self) -> u32 {
        self.instances.iter().filter(|i| i.state == InstanceState::Busy).count() as u32
    }

    /// Most recently idled instance, so older ones can age out.
    fn take_idle(&mut self) -> Option<InstanceId> {
        let inst = self
            .instances
            .iter_mut()
            .filter_map(|i| match i.state {
                InstanceState::Idle { since } => Some((since, i.id)),
                InstanceState::Busy => None,
            })
            .max()
            .map(|(_, id)| id)?;
        self.set_state(inst, InstanceState::Busy);
        Some(inst)
    }

    fn set_state(&mut self, id: InstanceId, state: InstanceState) {
        if let Some(i) = self.instances.iter_mut().find(|i| i.id == id) {
            i.state = state;
        }
    }

    pub fn on_request(&mut self, _now: Timestamp) -> Admission {
        self.counters.arrivals += 1;
        if let Some(instance) = self.take_idle() {
            return Admission::Assigned { instance, added_latency: Duration::ZERO };
        }
        if self.live() < self.config.max_instances {
            let id = self.next_instance;
            self.next_instance += 1;
            self.instances.push(Instance { id, state: InstanceState::Busy });
            self.counters.cold_starts += 1;
            return Admission::Assigned { instance: id, added_latency: self.config.cold_start_delay };
        }
        if self.queue.len() < self.config.queue_capacity as usize {
            let ticket = self.next_ticket;
            self.next_ticket += 1;
            self.queue.push_back(ticket);
            return Admission::Queued { ticket };
        }
        self.counters.rejected += 1;
        Admission::Rejected
    }

    /// A request finished on `instance`. The instance passes straight to the
    /// head of the queue if anyone is waiting.
    pub fn on_complete(&mut self, instance: InstanceId, now: Timestamp) -> Option<Grant> {
        let known = self.instances.iter().any(|i| i.id == instance && i.state == InstanceState::Busy);
        debug_assert!(known, "completion for unknown or idle instance {instance}");
        if !known {
            return None;
        }
        self.counters.served += 1;
        match self.queue.pop_front() {
            Some(ticket) => Some(Grant { ticket, instance }),
            None => {
                self.set_state(instance, InstanceState::Idle { since: now });
                None
            }
        }
    }

    /// Withdraws a queued request (e.g. its caller timed out). Counted as a
    /// rejection. Returns false if the ticket is no longer queued.
    pub fn cancel(&mut self, ticket: Ticket) -> bool {
        match self.queue.iter().position(|&t| t == ticket) {
            Some(pos) => {
                self.queue.remove(pos);
                self.counters.rejected += 1;
                true
            }
            None => false,
        }
    }

    pub fn on_tick(&mut self, now: Timestamp) -> TickOutcome {
        let mut out = TickOutcome::default();
        while !self.queue.is_empty() {
            let Some(instance) = self.take_idle() else { break };
            let ticket = self.queue.pop_front().expect("queue is non-empty");
            out.grants.push(Grant { ticket, instance });
        }
        let timeout = self.config.idle_timeout;
        self.instances.retain(|i| match i.state {
            InstanceState::Idle { since } if now.saturating_since(since) >= timeout => {
                out.retired.push(i.id);
                false
            }
            _ => true,
        });
        self.counters.scale_downs += out.retired.len() as u64;
        out
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            function: self.function.clone(),
            max_instances: self.config.max_instances,
            live: self.live(),
            busy: self.busy(),
            queued: self.queued(),
            counters: self.counters,
        }
    }
}

pub fn pool_metrics(pool: &InstancePool) -> MetricsSnapshot {
    pool.metrics()
}

/// Prometheus-style text lines for a set of snapshots.
pub fn render_metrics(snapshots: &[MetricsSnapshot]) -> String {
    let mut out = String::new();
    for s in snapshots {
        let labels = format!("{{function=\"{}\",version=\"{}\"}}", s.function.name, s.function.version);
        let c = &s.counters;
        for (name, value) in [
            ("live", u64::from(s.live)),
            ("queued", u64::from(s.queued)),
            ("served_total", c.served),
            ("cold_starts_total", c.cold_starts),
            ("rejected_total", c.rejected),
            ("scale_downs_total", c.scale_downs),
        ] {
            out.push_str(&format!("{name}{labels} {value}\n"));
        }
    }
    out
}
