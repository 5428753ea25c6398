//! Push notification of function results to Subscription endpoints.
//!
//! Subscriptions travel in the request bundle. After a successful response
//! has been committed, every subscription whose criteria is `*` or equals
//! a CarePlan activity code in the response receives the full response
//! bundle by POST, with exponential-backoff retries.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::fhir::{Bundle, Subscription, FHIR_JSON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Wait after the k-th failure (0-based) is `base_backoff * 2^k`.
    #[serde(with = "millis")]
    pub base_backoff: Duration,
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

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_backoff: Duration::from_millis(100) }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failures: u32) -> Duration {
        self.base_backoff * 2u32.saturating_pow(failures)
    }
}

/// Where notifications go. Returns the HTTP status, or a transport error.
pub trait Sink: Send + Sync {
    fn deliver(&self, url: &str, content_type: &str, body: &[u8]) -> Result<u16, String>;
}

pub struct HttpSink {
    client: reqwest::blocking::Client,
}

impl HttpSink {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().expect("http client");
        HttpSink { client }
    }
}

impl Sink for HttpSink {
    fn deliver(&self, url: &str, content_type: &str, body: &[u8]) -> Result<u16, String> {
        self.client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, content_type)
            .body(body.to_vec())
            .send()
            .map(|r| r.status().as_u16())
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryOutcome {
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub subscription: String,
    pub endpoint: String,
    pub attempts: u32,
    pub outcome: DeliveryOutcome,
    pub last_status: Option<u16>,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub request_id: String,
    pub complete: bool,
    pub deliveries: Vec<Delivery>,
}

impl DeliveryReport {
    pub fn failures(&self) -> usize {
        self.deliveries.iter().filter(|d| d.outcome == DeliveryOutcome::Failed).count()
    }
}

pub fn matches(subscription: &Subscription, response: &Bundle) -> bool {
    response
        .care_plans()
        .flat_map(|p| p.activity.iter())
        .any(|a| subscription.criteria == "*" || a.code.code == subscription.criteria)
}

pub fn matching_subscriptions<'a>(request: &'a Bundle, response: &Bundle) -> Vec<&'a Subscription> {
    request.subscriptions().filter(|s| matches(s, response)).collect()
}

/// Delivers `body` to one endpoint, retrying with backoff.
pub fn deliver_with_retry(
    subscription: &Subscription,
    body: &[u8],
    sink: &dyn Sink,
    clock: &dyn Clock,
    policy: &RetryPolicy,
) -> Delivery {
    let max = policy.max_attempts.max(1);
    let mut delivery = Delivery {
        subscription: subscription.id.clone(),
        endpoint: subscription.endpoint.clone(),
        attempts: 0,
        outcome: DeliveryOutcome::Failed,
        last_status: None,
        last_error: None,
    };
    while delivery.attempts < max {
        if delivery.attempts > 0 {
            clock.sleep(policy.backoff(delivery.attempts - 1));
        }
        delivery.attempts += 1;
        match sink.deliver(&subscription.endpoint, FHIR_JSON, body) {
            Ok(status) => {
                delivery.last_status = Some(status);
                delivery.last_error = None;
                if (200..300).contains(&status) {
                    delivery.outcome = DeliveryOutcome::Delivered;
                    break;
                }
            }
            Err(e) => delivery.last_error = Some(e),
        }
    }
    delivery
}

pub fn dispatch_subscriptions(
    request_id: &str,
    subscriptions: &[Subscription],
    response_body: &str,
    sink: &dyn Sink,
    clock: &dyn Clock,
    policy: &RetryPolicy,
) -> DeliveryReport {
    let deliveries = subscriptions
        .iter()
        .map(|s| deliver_with_retry(s, response_body.as_bytes(), sink, clock, policy))
        .collect();
    DeliveryReport { request_id: request_id.to_owned(), complete: true, deliveries }
}
