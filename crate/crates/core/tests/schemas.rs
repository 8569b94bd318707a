// SPDX-License-Identifier: Apache-2.0

//! The JSON schema documents under `schemas/` describe exactly the keys the
//! serializers emit.

use leafcut::canopy_synth::GROUND_TRUTH_SCHEMA;
use leafcut::leaf_detect::CANDIDATES_SCHEMA;
use leafcut::retrieval_sim::TRIAL_REPORT_SCHEMA;
use leafcut::{
    detect_leaves_detailed, generate_scene, run_trials, CandidateSet, ClusteringParams, GroundTruthFile,
    LeafFilterConfig, PreprocessConfig, SceneSpec, TrialConfig,
};
use serde_json::Value;

fn schema(name: &str) -> Value {
    let path = format!("{}/../../schemas/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// Walks instance and schema together; every object must carry exactly the
/// declared properties.
fn assert_keys(v: &Value, s: &Value, at: &str) {
    if let Some(any) = s.get("anyOf") {
        if !v.is_null() {
            let alt = any
                .as_array()
                .unwrap()
                .iter()
                .find(|a| a.get("properties").is_some())
                .unwrap();
            assert_keys(v, alt, at);
        }
        return;
    }
    if let (Some(obj), Some(props)) = (v.as_object(), s.get("properties").and_then(Value::as_object)) {
        let mut got: Vec<_> = obj.keys().collect();
        let mut want: Vec<_> = props.keys().collect();
        got.sort();
        want.sort();
        assert_eq!(got, want, "keys at {at}");
        for (k, sub) in props {
            assert_keys(&obj[k], sub, &format!("{at}.{k}"));
        }
    }
    if let (Some(arr), Some(items)) = (v.as_array(), s.get("items")) {
        for (i, x) in arr.iter().enumerate() {
            assert_keys(x, items, &format!("{at}[{i}]"));
        }
    }
}

fn version_const(s: &Value) -> &str {
    s["properties"]["schema_version"]["const"].as_str().unwrap()
}

#[test]
fn candidates_and_truth_match_their_schemas() {
    let spec = SceneSpec::indoor(2, 4);
    let (cloud, truth) = generate_scene(&spec).unwrap();
    let det = detect_leaves_detailed(
        &cloud,
        &PreprocessConfig::indoor(),
        &ClusteringParams::indoor(),
        &LeafFilterConfig::default(),
    );
    assert!(!det.candidates.is_empty());

    let s = schema("candidates.v1.schema.json");
    assert_eq!(version_const(&s), CANDIDATES_SCHEMA);
    let v: Value =
        serde_json::from_str(&CandidateSet::new("camera", det.counts, &det.candidates).to_json()).unwrap();
    assert_keys(&v, &s, "$");

    let s = schema("ground_truth.v1.schema.json");
    assert_eq!(version_const(&s), GROUND_TRUTH_SCHEMA);
    let v: Value = serde_json::from_str(&GroundTruthFile::new(&spec, &truth).to_json()).unwrap();
    assert_keys(&v, &s, "$");
}

#[test]
fn trial_report_matches_its_schema() {
    let scenes: Vec<SceneSpec> = (0..3).map(|i| SceneSpec::indoor(2, 30 + i)).collect();
    let report = run_trials(&scenes, &TrialConfig::indoor()).unwrap();
    let s = schema("trial_report.v1.schema.json");
    assert_eq!(version_const(&s), TRIAL_REPORT_SCHEMA);
    let v: Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_keys(&v, &s, "$");
}
