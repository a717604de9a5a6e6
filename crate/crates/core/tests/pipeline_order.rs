//! Stage ordering over randomized requests against mock and embedded SQL.

mod common;

use common::*;
use datagate_core::modifier::Stage;
use datagate_core::pipeline::{RequestOutcome, ServiceRequest};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use regex::Regex;

const PROJECT: &str = r#"{
  "name": "order",
  "profiles": {
    "mock": {
      "providerId": "MockProvider",
      "queryEndpoints": {
        "plain": {"queryTemplate": "find $x$", "bindVariables": [{"name": "x"}]},
        "guarded": {
          "queryTemplate": "find $x$",
          "bindVariables": [{"name": "x"}],
          "queryModifiers": ["upper-caser", {"id": "veto", "config": {"word": "VETO"}}],
          "resultModifiers": ["identity", {"id": "field-redaction", "config": {"drop": "nothing"}}]
        },
        "csv": {
          "queryTemplate": "rows $x$",
          "bindVariables": [{"name": "x"}],
          "resultModifiers": ["csv-formatter"]
        }
      },
      "submitEndpoints": {
        "put": {
          "queryTemplate": "store $x$",
          "bindVariables": [{"name": "x"}],
          "payloadModifiers": [{"id": "append", "config": {"suffix": "A"}}, {"id": "append", "config": {"suffix": "B"}}],
          "queryModifiers": ["veto"]
        }
      },
      "deleteEndpoints": {
        "drop": {"queryTemplate": "drop $x$", "bindVariables": [{"name": "x"}], "resultModifiers": ["identity"]}
      }
    },
    "sql": {
      "providerId": "EmbeddedSQLProvider",
      "dataSource": {
        "path": ":memory:",
        "initialize": true,
        "initScript": "CREATE TABLE t(a INTEGER); INSERT INTO t VALUES (1),(2),(3),(4),(5);"
      },
      "queryEndpoints": {
        "count": {
          "queryTemplate": "SELECT COUNT(*) AS c FROM t WHERE a >= $min$",
          "bindVariables": [{"name": "min", "type": "integer"}],
          "queryModifiers": [{"id": "veto", "config": {"word": ">= 999"}}],
          "resultModifiers": ["identity"]
        }
      }
    }
  }
}"#;

fn code(stage: Stage) -> char {
    match stage {
        Stage::Authenticate => 'a',
        Stage::Authorize => 'z',
        Stage::RateLimit => 'r',
        Stage::PayloadModifier => 'p',
        Stage::QueryModifier => 'q',
        Stage::ProviderExecute => 'x',
        Stage::ResultModifier => 't',
        Stage::Format => 'f',
    }
}

fn trace_string(o: &RequestOutcome) -> String {
    o.trace.iter().map(|e| code(e.stage)).collect()
}

fn ids(o: &RequestOutcome, stage: Stage) -> Vec<String> {
    o.trace.iter().filter(|e| e.stage == stage).map(|e| e.id.clone()).collect()
}

struct Case {
    req: ServiceRequest,
    submit: bool,
    query_chain: &'static [&'static str],
    result_chain: &'static [&'static str],
}

fn random_case(rng: &mut StdRng) -> Case {
    let word = match rng.random_range(0..4) {
        0 => "veto",
        1 => "VETO",
        _ => "ok",
    };
    let missing = rng.random_ratio(1, 15);
    let with_x = |base: &str| {
        if missing {
            base.to_string()
        } else {
            format!("{base}?x={word}{}", rng_suffix(word))
        }
    };
    match rng.random_range(0..7) {
        0 => Case {
            req: ServiceRequest::new("GET", &with_x("/services/order/mock/query/plain")),
            submit: false,
            query_chain: &[],
            result_chain: &[],
        },
        1 | 2 => Case {
            req: ServiceRequest::new("GET", &with_x("/services/order/mock/query/guarded")),
            submit: false,
            query_chain: &["upper-caser", "veto"],
            result_chain: &["identity", "field-redaction"],
        },
        3 => Case {
            req: ServiceRequest::new("POST", &with_x("/services/order/mock/submit/put"))
                .body(b"payload".to_vec()),
            submit: true,
            query_chain: &["veto"],
            result_chain: &[],
        },
        4 => Case {
            req: ServiceRequest::new("DELETE", &with_x("/services/order/mock/delete/drop")),
            submit: false,
            query_chain: &[],
            result_chain: &["identity"],
        },
        5 => Case {
            req: ServiceRequest::new("GET", &with_x("/services/order/mock/query/csv")),
            submit: false,
            query_chain: &[],
            result_chain: &["csv-formatter"],
        },
        _ => {
            let min = if rng.random_ratio(1, 4) { 999 } else { rng.random_range(0..7) };
            let path = if missing {
                "/services/order/sql/query/count".to_string()
            } else {
                format!("/services/order/sql/query/count?min={min}")
            };
            Case {
                req: ServiceRequest::new("GET", &path),
                submit: false,
                query_chain: &["veto"],
                result_chain: &["identity"],
            }
        }
    }
}

fn rng_suffix(word: &str) -> &'static str {
    if word == "ok" {
        "1"
    } else {
        ""
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stage_trace_matches_the_fixed_order() {
    let h = Harness::new(Options::default());
    h.deploy(PROJECT).await;
    let full = Regex::new(r"^azrp*q*xt*f$").unwrap();
    let prefix = Regex::new(r"^(a(z(rp*q*(xt*f?)?)?)?)?$").unwrap();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut statuses = std::collections::BTreeMap::new();
    for _ in 0..1000 {
        let case = random_case(&mut rng);
        let describe = format!("{} {}?{:?}", case.req.method, case.req.path, case.req.query);
        let o = h.gateway.handle(case.req).await;
        *statuses.entry(o.status).or_insert(0) += 1;
        let t = trace_string(&o);
        assert!(prefix.is_match(&t), "{describe}: trace {t} out of order");
        if o.status == 200 {
            assert!(full.is_match(&t), "{describe}: incomplete trace {t}");
            assert_eq!(ids(&o, Stage::QueryModifier), case.query_chain, "{describe}");
            assert_eq!(ids(&o, Stage::ResultModifier), case.result_chain, "{describe}");
        }
        if !case.submit {
            assert!(!t.contains('p'), "{describe}: payload stage outside submit");
        } else if o.status == 200 {
            assert_eq!(ids(&o, Stage::PayloadModifier), ["append", "append"]);
        }
        if o.status == 403 {
            assert!(!t.contains('x'), "{describe}: rejected request reached the provider: {t}");
        }
        let query_ids = ids(&o, Stage::QueryModifier);
        assert!(case.query_chain.starts_with(
            &query_ids.iter().map(String::as_str).collect::<Vec<_>>()
        ));
    }
    // The random mix must exercise success, rejection and bad input.
    for s in [200, 400, 403] {
        assert!(statuses.get(&s).copied().unwrap_or(0) > 20, "too few {s}: {statuses:?}");
    }
    assert_eq!(statuses.values().sum::<u32>(), 1000);
    h.gateway.auditor().flush().await;
    use datagate_core::store::{AuditFilter, AuditStore};
    assert_eq!(h.store.count_audit(&AuditFilter::default()).unwrap(), 1000);
}

#[tokio::test]
async fn mock_and_sql_traces_are_equal_for_equal_chains() {
    const TWIN: &str = r#"{"name": "twin", "profiles": {
      "mock": {"providerId": "MockProvider", "queryEndpoints": {"q": {"queryTemplate": "SELECT 1 AS one", "resultModifiers": ["identity"]}}},
      "sql": {"providerId": "EmbeddedSQLProvider", "dataSource": {"path": ":memory:"},
              "queryEndpoints": {"q": {"queryTemplate": "SELECT 1 AS one", "resultModifiers": ["identity"]}}}}}"#;
    let h = Harness::new(Options::default());
    h.deploy(TWIN).await;
    let a = h.get("/services/twin/mock/query/q").await;
    let b = h.get("/services/twin/sql/query/q").await;
    assert_eq!((a.status, b.status), (200, 200));
    assert_eq!(a.trace, b.trace);
    assert_eq!(json(&a), serde_json::json!([{"echo": "SELECT 1 AS one"}]));
    assert_eq!(json(&b), serde_json::json!([{"one": 1}]));
}

#[tokio::test]
async fn patient_id_end_to_end_against_embedded_sql() {
    const DOC: &str = r#"{"name": "clinic", "profiles": {"db": {
      "providerId": "EmbeddedSQLProvider",
      "dataSource": {"path": ":memory:", "initialize": true,
        "initScript": "CREATE TABLE PATIENT_TABLE(PATIENT_ID INTEGER, NAME TEXT); INSERT INTO PATIENT_TABLE VALUES (42, 'Ann'), (7, 'Bo');"},
      "queryEndpoints": {"getPatient": {
        "queryTemplate": "SELECT * FROM PATIENT_TABLE \nWHERE PATIENT_ID = $patientID$",
        "bindVariables": [{"name": "patientID", "type": "integer"}]}}}}}"#;
    let h = Harness::new(Options::default());
    h.deploy(DOC).await;
    let o = h.get("/services/clinic/db/query/getPatient?patientID=42").await;
    assert_eq!(o.status, 200);
    assert_eq!(json(&o), serde_json::json!([{"PATIENT_ID": 42, "NAME": "Ann"}]));
    let missing = h.get("/services/clinic/db/query/getPatient").await;
    assert_eq!(missing.status, 400);
    assert!(String::from_utf8_lossy(&missing.body).contains("patientID"));
    let inject = h.get("/services/clinic/db/query/getPatient?patientID=4%3B%20DROP%20TABLE%20x").await;
    assert_eq!(inject.status, 400);
}
