// Shared bodies of the fuzz targets. The core crate's corpus replay test
// includes this file too, so every checked-in seed runs under `cargo test`.

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use datagate_core::model::{parse_project_file, parse_server_config, relaxed};
use datagate_core::pipeline::route;
use datagate_core::provider::payload::parse_records;
use datagate_core::model::PayloadFormat;
use datagate_core::security::JwtVerifier;
use datagate_core::template::{
    extract_bind_variables, substitute, tokenize, QueryTemplate, Segment, SubstitutionMode,
};

const PUBLIC_KEY: &[u8] = include_bytes!("../crates/core/tests/fixtures/keys/primary_public.pem");

pub fn project_file(data: &[u8]) {
    if let Ok(project) = parse_project_file(data, "fuzz") {
        let text = datagate_core::model::serialize_project_file(&project);
        let again = parse_project_file(text.as_bytes(), "other")
            .expect("serialized project must parse");
        assert_eq!(again, project);
    }
}

pub fn server_config(data: &[u8]) {
    if let Ok(config) = parse_server_config(data) {
        assert_ne!(config.service_port, config.console_port);
    }
}

pub fn relaxed_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let stripped = relaxed::strip_trailing_commas(text);
    assert!(stripped.len() <= text.len());
    // Anything strict JSON accepts, the relaxed reader accepts identically.
    if let Ok(strict) = serde_json::from_str::<serde_json::Value>(text) {
        let loose: serde_json::Value = relaxed::from_str(text).expect("strict JSON is relaxed JSON");
        assert_eq!(strict, loose);
    }
}

/// First line is the template, every following line a parameter value.
pub fn template(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut lines = text.split('\n');
    let tpl = lines.next().unwrap_or_default();
    let values: Vec<&str> = lines.collect();
    let Ok(segments) = tokenize(tpl) else {
        assert!(extract_bind_variables(tpl).is_err());
        return;
    };
    let rebuilt: String = segments.iter().map(Segment::to_string).collect();
    assert_eq!(rebuilt, tpl);
    let names = extract_bind_variables(tpl).expect("tokenized templates extract");
    let params: BTreeMap<String, String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), values.get(i).copied().unwrap_or("").to_string()))
        .collect();
    let template = QueryTemplate::new(tpl, Vec::new());
    let raw = substitute(&template, &params, SubstitutionMode::Raw).expect("raw always binds");
    assert_eq!(raw.applied_params, params);
    let _ = substitute(&template, &params, SubstitutionMode::SqlQuoted);
}

/// First line is the method, the rest the path.
pub fn service_route(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (method, path) = text.split_once('\n').unwrap_or(("GET", text));
    if let Ok(key) = route(method, path) {
        assert_eq!(key.path(), path);
    }
}

pub fn payload(data: &[u8]) {
    for format in [PayloadFormat::Json, PayloadFormat::Csv] {
        let _ = parse_records(data, format);
    }
}

pub fn jwt(data: &[u8]) {
    let Ok(token) = std::str::from_utf8(data) else {
        return;
    };
    let verifier = JwtVerifier::from_pem(PUBLIC_KEY, None, None).expect("fixture key");
    let now = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let _ = verifier.verify(token, now);
}
