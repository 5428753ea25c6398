//! Serverless runtime for FHIR-native clinical model functions.
//!
//! Functions exchange FHIR Bundles over HTTP, are discovered through
//! Endpoint resources, scale from zero in simulated instance pools and can
//! be chained into pipelines or hot-swapped by version.

pub mod clock;
pub mod config;
pub mod fhir;
pub mod gateway;
pub mod loadsim;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod registry;
pub mod scaler;
pub mod subscriptions;

pub use clock::{Clock, LogicalClock, SystemClock, Timestamp};
pub use fhir::{Bundle, Resource};
pub use gateway::{Gateway, GatewayConfig, Reply};
pub use model::{ManifestFile, ModelManifest};
pub use registry::Registry;
pub use scaler::{ScalerConfig, ScalerOverrides};
