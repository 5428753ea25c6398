//! Built-in handlers selectable from a manifest's `handler` field.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use crate::fhir::{
    Activity, Author, Bundle, CarePlan, CarePlanStatus, Coding, Decimal, Observation, ObservationValue, Patient,
};

use super::host::{wrap_careplan, Handler, HandlerFault, InvocationContext};
use super::manifest::{ManifestError, ModelManifest};
use super::scorecard::{feature_names, los_featurize, los_predict, sigmoid, CCI_SYSTEM, ICD10_SYSTEM};
use super::tree::{DecisionTree, CLASS_COUNT, FEATURE_COUNT};

pub const ARRHYTHMIA_FEATURE_SYSTEM: &str = "https://fhirfn.dev/CodeSystem/arrhythmia-feature";
pub const ARRHYTHMIA_CLASS_SYSTEM: &str = "https://fhirfn.dev/CodeSystem/arrhythmia-class";
pub const LOS_SYSTEM: &str = "https://fhirfn.dev/CodeSystem/length-of-stay";
pub const LOS_GT_10D: &str = "los-gt-10d";

pub const DECISION_TREE: &str = "decision-tree";
pub const LOS_SCORECARD: &str = "los-scorecard";
pub const LINEAR_SCORE: &str = "linear-score";
pub const BUILTIN_HANDLERS: [&str; 3] = [DECISION_TREE, LOS_SCORECARD, LINEAR_SCORE];

pub fn arrhythmia_feature(i: usize) -> Coding {
    Coding::new(ARRHYTHMIA_FEATURE_SYSTEM, format!("f{:02}", i + 1))
}

pub fn arrhythmia_class(label: u8) -> Coding {
    Coding::new(ARRHYTHMIA_CLASS_SYSTEM, format!("class-{label}"))
}

pub fn los_outcome() -> Coding {
    Coding::new(LOS_SYSTEM, LOS_GT_10D)
}

pub fn resolve_builtin(
    name: &str,
    manifest: &ModelManifest,
    parameters: &Value,
) -> Result<Arc<dyn Handler>, ManifestError> {
    match name {
        DECISION_TREE => Ok(Arc::new(TreeHandler::configure(manifest, parameters)?)),
        LOS_SCORECARD => Ok(Arc::new(LosScorecard::configure(manifest, parameters)?)),
        LINEAR_SCORE => Ok(Arc::new(LinearScore::configure(manifest, parameters)?)),
        other => Err(ManifestError::Invalid(format!(
            "unknown handler {other:?}; built-ins are {}",
            BUILTIN_HANDLERS.join(", ")
        ))),
    }
}

fn params<T: for<'de> Deserialize<'de> + Default>(handler: &str, value: &Value) -> Result<T, ManifestError> {
    if value.is_null() {
        return Ok(T::default());
    }
    T::deserialize(value).map_err(|e| ManifestError::Invalid(format!("{handler} parameters: {e}")))
}

fn require_codes(what: &str, declared: &BTreeSet<Coding>, needed: &BTreeSet<Coding>) -> Result<(), ManifestError> {
    if declared != needed {
        let want: Vec<String> = needed.iter().map(ToString::to_string).collect();
        return Err(ManifestError::Invalid(format!("{what} must be exactly [{}]", want.join(", "))));
    }
    Ok(())
}

fn the_patient(request: &Bundle) -> Result<&Patient, HandlerFault> {
    request.patients().next().ok_or_else(|| HandlerFault("request has no Patient".into()))
}

fn numeric_value(obs: &Observation) -> Result<f64, HandlerFault> {
    match &obs.value {
        Some(ObservationValue::Boolean(b)) => Ok(f64::from(u8::from(*b))),
        Some(ObservationValue::Quantity { value, .. }) => Ok(value.to_f64()),
        Some(ObservationValue::String(_)) | None => {
            Err(HandlerFault(format!("observation {} ({}) needs a boolean or quantity value", obs.id, obs.code)))
        }
    }
}

fn find<'a>(request: &'a Bundle, code: &Coding) -> Result<&'a Observation, HandlerFault> {
    request
        .observations()
        .find(|o| &o.code == code)
        .ok_or_else(|| HandlerFault(format!("no observation coded {code}")))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeParams {
    #[serde(default)]
    tree: Option<Value>,
}

/// Explanatory reference model: 15 boolean feature observations in, one
/// class activity out.
pub struct TreeHandler {
    tree: DecisionTree,
}

impl TreeHandler {
    pub fn new(tree: DecisionTree) -> Self {
        TreeHandler { tree }
    }

    fn configure(manifest: &ModelManifest, parameters: &Value) -> Result<Self, ManifestError> {
        let p: TreeParams = params(DECISION_TREE, parameters)?;
        let tree = match p.tree {
            Some(nodes) => DecisionTree::from_json(&nodes.to_string()).map_err(|e| ManifestError::Invalid(e.to_string()))?,
            None => DecisionTree::reference(),
        };
        require_codes("input_codes", &manifest.input_codes, &(0..FEATURE_COUNT).map(arrhythmia_feature).collect())?;
        require_codes("output_codes", &manifest.output_codes, &(1..=CLASS_COUNT).map(arrhythmia_class).collect())?;
        Ok(TreeHandler { tree })
    }
}

impl Handler for TreeHandler {
    fn handle(&self, _ctx: &InvocationContext, request: &Bundle) -> Result<Bundle, HandlerFault> {
        let patient = the_patient(request)?;
        let mut features = [0u8; FEATURE_COUNT];
        for (i, slot) in features.iter_mut().enumerate() {
            let obs = find(request, &arrhythmia_feature(i))?;
            let v = numeric_value(obs)?;
            *slot = match v {
                0.0 => 0,
                1.0 => 1,
                _ => return Err(HandlerFault(format!("feature {} must be 0 or 1, got {v}", obs.code.code))),
            };
        }
        let label = self.tree.classify(&features).map_err(|e| HandlerFault(e.to_string()))?;
        let code = arrhythmia_class(label);
        let plan = CarePlan {
            id: "arrhythmia".into(),
            subject: patient.id.clone(),
            status: CarePlanStatus::Active,
            activity: vec![Activity { detail: format!("arrhythmia class {label}"), code, probability: None }],
            author: None,
        };
        Ok(Bundle::new(vec![patient.clone().into(), plan.into()]))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScorecardParams {
    #[serde(default)]
    icd_prefixes: Vec<String>,
    #[serde(default)]
    cci_prefixes: Vec<String>,
    #[serde(default)]
    weights: BTreeMap<String, f64>,
    #[serde(default)]
    bias: f64,
}

/// Predictive reference model: length-of-stay vectorization followed by a
/// logistic scorecard.
pub struct LosScorecard {
    author: Author,
    icd_prefixes: Vec<String>,
    cci_prefixes: Vec<String>,
    weights: Vec<f64>,
    bias: f64,
}

impl LosScorecard {
    fn configure(manifest: &ModelManifest, parameters: &Value) -> Result<Self, ManifestError> {
        let p: ScorecardParams = params(LOS_SCORECARD, parameters)?;
        for prefix in p.icd_prefixes.iter().chain(&p.cci_prefixes) {
            if prefix.chars().count() != 3 {
                return Err(ManifestError::Invalid(format!("prefix {prefix:?} must have 3 characters")));
            }
        }
        let names = feature_names(&p.icd_prefixes, &p.cci_prefixes);
        let unknown: Vec<&String> = p.weights.keys().filter(|k| !names.contains(k)).collect();
        if !unknown.is_empty() || p.weights.len() != names.len() {
            return Err(ManifestError::Invalid(format!(
                "{LOS_SCORECARD} needs one weight per feature [{}]",
                names.join(", ")
            )));
        }
        let weights = names.iter().map(|n| p.weights[n]).collect();
        let inputs: BTreeSet<Coding> = p
            .icd_prefixes
            .iter()
            .map(|c| Coding::new(ICD10_SYSTEM, c))
            .chain(p.cci_prefixes.iter().map(|c| Coding::new(CCI_SYSTEM, c)))
            .collect();
        require_codes("input_codes", &manifest.input_codes, &inputs)?;
        require_codes("output_codes", &manifest.output_codes, &[los_outcome()].into())?;
        Ok(LosScorecard { author: manifest.author(), icd_prefixes: p.icd_prefixes, cci_prefixes: p.cci_prefixes, weights, bias: p.bias })
    }
}

impl Handler for LosScorecard {
    fn handle(&self, ctx: &InvocationContext, request: &Bundle) -> Result<Bundle, HandlerFault> {
        let patient = the_patient(request)?;
        let observations: Vec<Observation> = request.observations().cloned().collect();
        let features = los_featurize(patient, &observations, &self.icd_prefixes, &self.cci_prefixes, ctx.as_of)
            .map_err(|e| HandlerFault(e.to_string()))?;
        let p = los_predict(&features, &self.weights, self.bias).map_err(|e| HandlerFault(e.to_string()))?;
        let mut plan = wrap_careplan(p, &los_outcome(), &patient.id, &self.author);
        plan.activity[0].detail = "length of stay exceeding 10 days".into();
        Ok(Bundle::new(vec![patient.clone().into(), plan.into()]))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightSpec {
    system: String,
    code: String,
    weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSpec {
    system: String,
    code: String,
    #[serde(default)]
    detail: String,
    #[serde(default)]
    bias: f64,
    #[serde(default)]
    weights: Vec<WeightSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    #[serde(default)]
    outputs: Vec<OutputSpec>,
}

/// Generic logistic score per output code over the numeric values of input
/// observations (booleans count as 0/1). Emits one activity per output.
pub struct LinearScore {
    outputs: Vec<ScoredOutput>,
}

struct ScoredOutput {
    code: Coding,
    detail: String,
    bias: f64,
    weights: Vec<(Coding, f64)>,
}

impl LinearScore {
    fn configure(manifest: &ModelManifest, parameters: &Value) -> Result<Self, ManifestError> {
        let p: LinearParams = params(LINEAR_SCORE, parameters)?;
        let declared: BTreeSet<Coding> = p.outputs.iter().map(|o| Coding::new(&o.system, &o.code)).collect();
        require_codes("output_codes", &manifest.output_codes, &declared)?;
        let mut outputs = Vec::new();
        for o in p.outputs {
            let mut weights = Vec::new();
            for w in o.weights {
                let code = Coding::new(w.system, w.code);
                if !manifest.input_codes.contains(&code) {
                    return Err(ManifestError::Invalid(format!("weight on {code} which is not an input code")));
                }
                weights.push((code, w.weight));
            }
            outputs.push(ScoredOutput { code: Coding::new(o.system, o.code), detail: o.detail, bias: o.bias, weights });
        }
        Ok(LinearScore { outputs })
    }
}

impl Handler for LinearScore {
    fn handle(&self, _ctx: &InvocationContext, request: &Bundle) -> Result<Bundle, HandlerFault> {
        let patient = the_patient(request)?;
        let mut activity = Vec::new();
        for ScoredOutput { code, detail, bias, weights } in &self.outputs {
            let mut z = *bias;
            for (input, w) in weights {
                z += w * numeric_value(find(request, input)?)?;
            }
            let detail = if detail.is_empty() { code.code.clone() } else { detail.clone() };
            activity.push(Activity { detail, code: code.clone(), probability: Decimal::from_f64(sigmoid(z)).ok() });
        }
        let plan = CarePlan {
            id: "linear".into(),
            subject: patient.id.clone(),
            status: CarePlanStatus::Active,
            activity,
            author: None,
        };
        Ok(Bundle::new(vec![patient.clone().into(), plan.into()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::manifest::ModelTaxonomy;
    use chrono::NaiveDate;
    use serde_json::json;

    fn manifest(inputs: BTreeSet<Coding>, outputs: BTreeSet<Coding>) -> ModelManifest {
        ModelManifest {
            name: "m".into(),
            version: "1.0.0".into(),
            taxonomy: ModelTaxonomy::Predictive,
            input_codes: inputs,
            output_codes: outputs,
            memory_budget_bytes: 1,
            description: String::new(),
        }
    }

    fn ctx() -> InvocationContext {
        InvocationContext { as_of: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), deterministic: true }
    }

    #[test]
    fn tree_handler_classifies_feature_observations() {
        let inputs = (0..15).map(arrhythmia_feature).collect();
        let outputs = (1..=6).map(arrhythmia_class).collect();
        let h = resolve_builtin(DECISION_TREE, &manifest(inputs, outputs), &Value::Null).unwrap();
        let mut entry = vec![Patient::new("p").into()];
        for i in 0..15 {
            entry.push(
                Observation::new(format!("f{i}"), arrhythmia_feature(i))
                    .with_value(ObservationValue::Boolean(false))
                    .with_subject("p")
                    .into(),
            );
        }
        let out = h.handle(&ctx(), &Bundle::new(entry)).unwrap();
        let label = DecisionTree::reference().classify(&[0; 15]).unwrap();
        assert_eq!(out.care_plans().next().unwrap().activity[0].code, arrhythmia_class(label));
    }

    #[test]
    fn tree_handler_requires_exact_codes() {
        let err = resolve_builtin(DECISION_TREE, &manifest(BTreeSet::new(), BTreeSet::new()), &Value::Null);
        assert!(err.is_err());
    }

    #[test]
    fn scorecard_weights_must_cover_features() {
        let inputs: BTreeSet<Coding> = [Coding::new(ICD10_SYSTEM, "I50")].into();
        let m = manifest(inputs, [los_outcome()].into());
        let partial = json!({ "icd_prefixes": ["I50"], "weights": { "age_over_40": 1.0 } });
        assert!(resolve_builtin(LOS_SCORECARD, &m, &partial).is_err());
        let full = json!({ "icd_prefixes": ["I50"], "weights": { "age_over_40": 1.0, "gender_male": 0.0, "icd_I50": 2.0 }, "bias": -1.0 });
        assert!(resolve_builtin(LOS_SCORECARD, &m, &full).is_ok());
    }

    #[test]
    fn linear_score_reads_quantities_and_booleans() {
        let a = Coding::new("s", "a");
        let b = Coding::new("s", "b");
        let out = Coding::new("s", "out");
        let m = manifest([a.clone(), b.clone()].into(), [out.clone()].into());
        let p = json!({ "outputs": [{ "system": "s", "code": "out", "bias": -1.0,
            "weights": [{ "system": "s", "code": "a", "weight": 2.0 }, { "system": "s", "code": "b", "weight": 0.5 }] }] });
        let h = resolve_builtin(LINEAR_SCORE, &m, &p).unwrap();
        let req = Bundle::new(vec![
            Patient::new("p").into(),
            Observation::new("1", a).with_value(ObservationValue::Boolean(true)).into(),
            Observation::new("2", b)
                .with_value(ObservationValue::Quantity { value: "0.5".parse().unwrap(), unit: "1".into() })
                .into(),
        ]);
        let res = h.handle(&ctx(), &req).unwrap();
        let prob = res.care_plans().next().unwrap().activity[0].probability.as_ref().unwrap().to_f64();
        assert!((prob - 1.0 / (1.0 + (-1.25f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn unknown_handler_name() {
        let m = manifest(BTreeSet::new(), BTreeSet::new());
        assert!(matches!(resolve_builtin("xgboost", &m, &Value::Null), Err(ManifestError::Invalid(_))));
    }
}
