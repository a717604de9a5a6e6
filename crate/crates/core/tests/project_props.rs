//! Project files: serialize and parse are inverse, and templates must agree
//! with their declared variables.

use std::collections::{BTreeMap, BTreeSet};

use datagate_core::model::{
    parse_project_file, serialize_project_file, AccessRule, AttributeFilter,
    ConnectionDescriptor, DataProviderProfile, Endpoint, EndpointKind, ModelError, ModifierRef,
    OutputFormat, Project, SubmitType,
};
use datagate_core::template::{BindVariable, QueryTemplate, TypeHint};
use proptest::prelude::*;
use serde_json::{json, Value};

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}"
}

fn small_map() -> impl Strategy<Value = BTreeMap<String, String>> {
    prop::collection::btree_map("[a-z]{1,5}", "[ -~]{0,8}", 0..3)
}

fn type_hint() -> impl Strategy<Value = TypeHint> {
    prop_oneof![
        Just(TypeHint::String),
        Just(TypeHint::Integer),
        Just(TypeHint::Decimal),
        Just(TypeHint::Boolean),
    ]
}

fn template() -> impl Strategy<Value = QueryTemplate> {
    prop::collection::btree_set(ident(), 0..4).prop_flat_map(|names| {
        let names: Vec<String> = names.into_iter().collect();
        let n = names.len();
        (
            Just(names),
            prop::collection::vec((type_hint(), prop::option::of("[a-z0-9]{0,4}"), any::<bool>()), n),
            "[a-z ]{0,6}",
        )
            .prop_map(|(names, specs, filler)| {
                let mut text = format!("select{filler}");
                let mut vars = Vec::new();
                for (name, (hint, default, described)) in names.iter().zip(specs) {
                    text.push_str(&format!(" ${name}$ $$"));
                    let mut v = match default {
                        Some(d) => BindVariable::optional(name.clone(), hint, d),
                        None => BindVariable::required(name.clone(), hint),
                    };
                    if described {
                        v.description = Some(format!("the {name}"));
                    }
                    vars.push(v);
                }
                QueryTemplate::new(text, vars)
            })
    })
}

fn modifiers() -> impl Strategy<Value = Vec<ModifierRef>> {
    prop::collection::vec(
        (ident(), small_map()).prop_map(|(id, config)| ModifierRef { id, config }),
        0..3,
    )
}

fn endpoint(kind: EndpointKind) -> impl Strategy<Value = Endpoint> {
    (
        ident(),
        template(),
        prop_oneof![Just(OutputFormat::Json), Just(OutputFormat::Csv), Just(OutputFormat::Raw)],
        small_map(),
        modifiers(),
        modifiers(),
        modifiers(),
        prop::option::of(prop::collection::btree_set(ident(), 0..3)),
        any::<bool>(),
        prop::option::of(prop_oneof![Just("JSON"), Just("CSV")]),
        prop::option::of("[a-z]{0,5}"),
    )
        .prop_map(
            move |(name, tpl, fmt, metadata, qm, rm, pm, roles, filtered, input, note)| {
                let mut ep = Endpoint::new(name, kind, tpl);
                ep.output_format = fmt;
                ep.metadata = metadata;
                ep.query_modifiers = qm;
                ep.result_modifiers = rm;
                ep.visibility = roles.map(|allowed_roles| AccessRule {
                    attribute_filter: (filtered && kind == EndpointKind::Query).then(|| {
                        AttributeFilter {
                            attribute: "project".into(),
                            param: None,
                            allowed_values: ["PUBLIC".to_string()].into(),
                            exempt_roles: allowed_roles.iter().take(1).cloned().collect(),
                        }
                    }),
                    allowed_roles,
                });
                if kind == EndpointKind::Submit {
                    ep.payload_modifiers = pm;
                    ep.submit_type = Some(if filtered { SubmitType::FormData } else { SubmitType::Raw });
                    if let Some(t) = input {
                        ep.properties.insert("inputType".into(), json!(t));
                    }
                }
                if let Some(n) = note {
                    ep.extra.insert("x_note".into(), Value::String(n));
                }
                ep
            },
        )
}

fn profile() -> impl Strategy<Value = DataProviderProfile> {
    (
        ident(),
        "[A-Z][A-Za-z]{2,10}",
        small_map(),
        any::<bool>(),
        prop::collection::vec(endpoint(EndpointKind::Query), 0..3),
        prop::collection::vec(endpoint(EndpointKind::Submit), 0..2),
        prop::collection::vec(endpoint(EndpointKind::Update), 0..2),
        prop::collection::vec(endpoint(EndpointKind::Delete), 0..2),
    )
        .prop_map(|(name, provider, props, init, q, s, u, d)| {
            let mut p = DataProviderProfile::new(name, provider);
            p.data_source = ConnectionDescriptor {
                properties: props,
                initialize: init,
            };
            for ep in q.into_iter().chain(s).chain(u).chain(d) {
                p = p.with_endpoint(ep);
            }
            p
        })
}

fn project() -> impl Strategy<Value = Project> {
    (ident(), prop::collection::vec(profile(), 1..3), prop::option::of(0u32..100)).prop_map(
        |(name, profiles, rev)| {
            let mut p = Project::new(name);
            for prof in profiles {
                p = p.with_profile(prof);
            }
            if let Some(r) = rev {
                p.extra.insert("revision".into(), json!(r));
            }
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn serialize_then_parse_is_identity(p in project()) {
        let text = serialize_project_file(&p);
        let back = parse_project_file(text.as_bytes(), "unused").unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(serialize_project_file(&back), text);
    }

    #[test]
    fn trailing_commas_do_not_change_the_model(p in project()) {
        let text = serialize_project_file(&p);
        let relaxed = text.replace("\n}", ",\n}").replace("\n  }", ",\n  }").replace("\n]", ",\n]");
        let back = parse_project_file(relaxed.as_bytes(), "unused").unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn undeclared_or_unused_variables_are_rejected(
        declared in prop::collection::btree_set(ident(), 0..4),
        used in prop::collection::btree_set(ident(), 0..4),
    ) {
        let text: String = used.iter().map(|v| format!("${v}$ ")).collect();
        let vars: Vec<Value> = declared.iter().map(|n| json!({"name": n})).collect();
        let doc = json!({
            "name": "t",
            "profiles": {"m": {"providerId": "MockProvider",
                "queryEndpoints": {"e": {"queryTemplate": text, "bindVariables": vars}}}}
        });
        let res = parse_project_file(doc.to_string().as_bytes(), "t");
        if declared == used {
            prop_assert!(res.is_ok());
        } else {
            let mismatch = matches!(res, Err(ModelError::TemplateMismatch { .. }));
            prop_assert!(mismatch);
        }
    }
}

#[test]
fn every_route_is_listed_once() {
    let doc = r#"{"name":"r","profiles":{"a":{"providerId":"X",
        "queryEndpoints":{"q1":{},"q2":{}},"deleteEndpoints":{"d":{}}},
        "b":{"providerId":"Y","submitEndpoints":{"s":{}},"updateEndpoints":{"u":{}}}}}"#;
    let p = parse_project_file(doc.as_bytes(), "r").unwrap();
    let routes = p.routes();
    let unique: BTreeSet<_> = routes.iter().collect();
    assert_eq!(unique.len(), routes.len());
    assert_eq!(
        routes,
        vec![
            ("DELETE", "/services/r/a/delete/d".to_string()),
            ("GET", "/services/r/a/query/q1".to_string()),
            ("GET", "/services/r/a/query/q2".to_string()),
            ("POST", "/services/r/b/submit/s".to_string()),
            ("PUT", "/services/r/b/update/u".to_string()),
        ]
    );
}
