mod common;

use fhirfn_core::fhir::{self, Resource};
use fhirfn_core::model::builtin::arrhythmia_class;
use fhirfn_core::model::{los_predict, DecisionTree, FeatureVector};
use fhirfn_core::reference::{arrhythmia_request, los_request};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits_to_features(bits: u16) -> Vec<u8> {
    (0..15).map(|i| (bits >> i & 1) as u8).collect()
}

#[test]
fn tree_agrees_with_oracle_on_every_input() {
    let tree = DecisionTree::reference();
    let json = common::reference_tree_json();
    for bits in 0..(1u16 << 15) {
        assert_eq!(tree.classify(&bits_to_features(bits)).unwrap(), common::tree_oracle(&json, 0, bits), "bits {bits:015b}");
    }
}

#[test]
fn arrhythmia_function_matches_oracle_end_to_end() {
    let (gw, _clock) = common::reference_gateway(common::deterministic_config());
    let json = common::reference_tree_json();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let bits: u16 = rng.gen_range(0..1 << 15);
        let (response, _) = gw.call("arrhythmia-classifier", None, arrhythmia_request("p", bits)).unwrap();
        let plan = response.care_plans().next().unwrap();
        assert_eq!(plan.activity[0].code, arrhythmia_class(common::tree_oracle(&json, 0, bits)));
    }
}

fn closed_form(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn scorecard_matches_closed_form_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..1000 {
        let n = rng.gen_range(1..=12);
        let mut fv = FeatureVector::default();
        for i in 0..n {
            fv.set(format!("f{i:02}"), rng.gen_bool(0.5));
        }
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let bias = rng.gen_range(-3.0..3.0);
        let z = bias + fv.values().zip(&weights).map(|(x, w)| f64::from(x) * w).sum::<f64>();
        let p = los_predict(&fv, &weights, bias).unwrap();
        assert!((p - closed_form(z)).abs() <= 1e-9, "draw {draw}: {p} vs {}", closed_form(z));

        let names: Vec<String> = fv.names().map(str::to_owned).collect();
        for (name, w) in names.iter().zip(&weights) {
            if *w <= 0.0 || fv.get(name) == Some(1) {
                continue;
            }
            let mut flipped = fv.clone();
            flipped.set(name.clone(), true);
            let q = los_predict(&flipped, &weights, bias).unwrap();
            assert!(q >= p, "draw {draw}: raising {name} lowered {p} to {q}");
            if z + w < 30.0 {
                assert!(q > p, "draw {draw}: raising {name} left {p} unchanged");
            }
        }
    }
}

#[test]
fn los_function_scores_a_known_patient() {
    let (gw, _clock) = common::reference_gateway(common::deterministic_config());
    // Male, 62 on the evaluation date, heart failure only:
    // -2.5 + 0.9 (age) + 0.2 (male) + 1.1 (I50) = -0.3
    let born = chrono::NaiveDate::from_ymd_opt(1961, 4, 12).unwrap();
    let request = los_request("p1", born, fhir::Gender::Male, &["I50"]);
    let (response, version) = gw.call("los-predictor", None, request).unwrap();
    assert_eq!(version, "1.0.0");
    let plan = response.care_plans().next().unwrap();
    let p = plan.activity[0].probability.as_ref().unwrap().to_f64();
    assert!((p - closed_form(-0.3)).abs() <= 1e-9, "{p}");
    assert_eq!(plan.author.as_ref().unwrap().to_string(), "los-predictor@1.0.0");
    assert!(matches!(&response.entry[0], Resource::Patient(pt) if pt.id == "p1"));
}
