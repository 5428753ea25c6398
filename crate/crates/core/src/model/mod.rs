//! Model functions: manifests, the invocation contract and the reference
//! models (an explanatory decision tree and a predictive length-of-stay
//! scorecard).

pub mod builtin;
mod host;
mod manifest;
pub mod scorecard;
pub mod tree;

pub use host::{invoke_model, request_digest, wrap_careplan, Handler, HandlerFault, InvocationContext, InvokeError};
pub use manifest::{
    validate_name, validate_version, ManifestError, ManifestFile, ModelManifest, ModelTaxonomy, StageRef,
    DEFAULT_MEMORY_BUDGET_BYTES, MAX_MEMORY_BUDGET_BYTES,
};
pub use scorecard::{los_featurize, los_predict, FeatureVector};
pub use tree::{DecisionTree, TreeNode};
