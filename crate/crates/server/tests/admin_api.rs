mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use common::*;
use datagate_core::model::AuthProtocol;
use datagate_core::security::issue_api_key;
use datagate_core::store::{AuditFilter, AuditStore};
use datagate_server::{ephemeral_config, ServerHandle};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

fn roles(r: &[&str]) -> Option<BTreeSet<String>> {
    Some(r.iter().map(|s| s.to_string()).collect())
}

struct Fixture {
    h: ServerHandle,
    c: Client,
    admin: String,
    user: String,
    _dir: tempfile::TempDir,
}

impl Fixture {
    async fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ephemeral_config();
        cfg.enable_authentication = true;
        cfg.enable_authorization = true;
        cfg.authentication_protocol = AuthProtocol::ApiKey;
        cfg.projects_dir = Some(dir.path().to_path_buf());
        let h = start(cfg).await;
        let now = chrono::Utc::now();
        let admin = issue_api_key(h.store().as_ref(), "root", roles(&["admin"]), None, now)
            .unwrap()
            .key;
        let user = issue_api_key(h.store().as_ref(), "alice", roles(&["api_user"]), None, now)
            .unwrap()
            .key;
        Fixture {
            h,
            c: Client::new(),
            admin,
            user,
            _dir: dir,
        }
    }

    fn admin_url(&self, path: &str) -> String {
        format!("{}{path}", self.h.console_url())
    }

    fn service_url(&self, path: &str) -> String {
        format!("{}{path}", self.h.service_url())
    }

    async fn call(&self, method: reqwest::Method, path: &str, key: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut rb = self.c.request(method, self.admin_url(path)).header("api_key", key);
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        let r = rb.send().await.unwrap();
        let status = r.status();
        let text = r.text().await.unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }
}

#[tokio::test]
async fn unauthenticated_admin_calls_are_rejected() {
    let f = Fixture::new().await;
    let r = f.c.get(f.admin_url("/admin/users")).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let (s, _) = f.call(Method::GET, "/admin/users", "not-a-key", None).await;
    assert_eq!(s, 401);
    f.h.shutdown().await;
}

#[tokio::test]
async fn user_listing_is_partitioned_by_role() {
    let f = Fixture::new().await;
    let (s, all) = f.call(Method::GET, "/admin/users", &f.admin, None).await;
    assert_eq!(s, 200);
    let subjects: BTreeSet<&str> = all.as_array().unwrap().iter().map(|u| u["subject"].as_str().unwrap()).collect();
    assert_eq!(subjects, BTreeSet::from(["alice", "root"]));

    let (s, mine) = f.call(Method::GET, "/admin/users", &f.user, None).await;
    assert_eq!(s, 200);
    assert_eq!(mine.as_array().unwrap().len(), 1);
    assert_eq!(mine[0]["subject"], "alice");

    let (s, keys) = f.call(Method::GET, "/admin/keys", &f.user, None).await;
    assert_eq!(s, 200);
    for k in keys.as_array().unwrap() {
        assert_eq!(k["subject"], "alice");
        assert!(k.get("keyHash").is_none() && k.get("key").is_none());
    }
    f.h.shutdown().await;
}

#[tokio::test]
async fn non_admin_cannot_issue_for_others() {
    let f = Fixture::new().await;
    let (s, _) = f
        .call(Method::POST, "/admin/keys", &f.user, Some(json!({"subject": "root"})))
        .await;
    assert_eq!(s, 403);
    let (s, _) = f
        .call(Method::POST, "/admin/keys", &f.user, Some(json!({"roles": ["admin"]})))
        .await;
    assert_eq!(s, 403);
    let (s, issued) = f.call(Method::POST, "/admin/keys", &f.user, Some(json!({}))).await;
    assert_eq!(s, 201);
    assert_eq!(issued["subject"], "alice");
    let (s, _) = f.call(Method::POST, "/admin/users", &f.user, Some(json!({"subject": "eve"}))).await;
    assert_eq!(s, 403);
    f.h.shutdown().await;
}

#[tokio::test]
async fn deactivation_and_revocation_take_effect_on_the_next_call() {
    let f = Fixture::new().await;
    f.h.registry().deploy(ECHO_PROJECT.as_bytes(), "demo").await.unwrap();
    let echo = f.service_url("/services/demo/mock/query/echo?who=a");
    let call = |key: String| {
        let c = f.c.clone();
        let echo = echo.clone();
        async move { c.get(echo).header("api_key", key).send().await.unwrap().status() }
    };
    assert_eq!(call(f.user.clone()).await, 200);
    let (s, _) = f.call(Method::POST, "/admin/users/alice/deactivate", &f.admin, None).await;
    assert_eq!(s, 200);
    assert_eq!(call(f.user.clone()).await, 401);
    let (s, _) = f.call(Method::POST, "/admin/users/alice/activate", &f.admin, None).await;
    assert_eq!(s, 200);
    assert_eq!(call(f.user.clone()).await, 200);

    let (_, issued) = f.call(Method::POST, "/admin/keys", &f.admin, Some(json!({"subject": "bob"}))).await;
    let bob = issued["key"].as_str().unwrap().to_string();
    let fp = issued["fingerprint"].as_str().unwrap().to_string();
    assert_eq!(call(bob.clone()).await, 200);
    let (s, _) = f.call(Method::DELETE, &format!("/admin/keys/{fp}"), &f.user, None).await;
    assert_eq!(s, 403);
    let (s, _) = f.call(Method::DELETE, &format!("/admin/keys/{fp}"), &f.admin, None).await;
    assert_eq!(s, 200);
    assert_eq!(call(bob).await, 401);

    f.h.gateway().auditor().flush().await;
    let filter = AuditFilter {
        subject: None,
        status: Some(401),
        ..AuditFilter::default()
    };
    assert_eq!(f.h.store().count_audit(&filter).unwrap(), 2);
    f.h.shutdown().await;
}

#[tokio::test]
async fn role_disjoint_endpoint_is_forbidden() {
    let f = Fixture::new().await;
    f.h.registry().deploy(ECHO_PROJECT.as_bytes(), "demo").await.unwrap();
    let url = f.service_url("/services/demo/mock/query/secret");
    let s = f.c.get(&url).header("api_key", &f.user).send().await.unwrap().status();
    assert_eq!(s, 403);
    let s = f.c.get(&url).header("api_key", &f.admin).send().await.unwrap().status();
    assert_eq!(s, 200);
    f.h.shutdown().await;
}

#[tokio::test]
async fn project_lifecycle_through_the_api() {
    let f = Fixture::new().await;
    let post = |body: &'static str, key: String| {
        let c = f.c.clone();
        let url = f.admin_url("/admin/projects");
        async move {
            let r = c.post(url).header("api_key", key).body(body).send().await.unwrap();
            let s = r.status();
            (s, r.json::<Value>().await.unwrap())
        }
    };
    let (s, _) = post(ECHO_PROJECT, f.user.clone()).await;
    assert_eq!(s, 403);
    let (s, v) = post(ECHO_PROJECT, f.admin.clone()).await;
    assert_eq!(s, 200);
    assert_eq!(v, json!({"name": "demo", "version": 1}));
    let echo = f.service_url("/services/demo/mock/query/echo?who=z");
    let status = f.c.get(&echo).header("api_key", &f.admin).send().await.unwrap().status();
    assert_eq!(status, 200);

    let (s, _) = post("{not json", f.admin.clone()).await;
    assert_eq!(s, 400);
    assert_eq!(f.h.registry().get("demo").unwrap().version, 1);

    const V2: &str = r#"{"name": "demo", "profiles": {"mock": {"providerId": "MockProvider",
        "queryEndpoints": {"other": {"queryTemplate": "x"}}}}}"#;
    let (s, v) = post(V2, f.admin.clone()).await;
    assert_eq!(s, 200);
    assert_eq!(v["version"], 2);
    let status = f.c.get(&echo).header("api_key", &f.admin).send().await.unwrap().status();
    assert_eq!(status, 404);

    let r = f.c.get(f.admin_url("/admin/projects/demo")).header("api_key", &f.user).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["x-project-version"], "2");
    let text = r.text().await.unwrap();
    let reparsed = datagate_core::model::parse_project_file(text.as_bytes(), "x").unwrap();
    assert_eq!(reparsed, f.h.registry().get("demo").unwrap().project);

    let (s, _) = f.call(Method::DELETE, "/admin/projects/demo", &f.admin, None).await;
    assert_eq!(s, 204);
    assert!(f.h.registry().get("demo").is_none());
    let (s, _) = f.call(Method::GET, "/admin/projects/demo", &f.admin, None).await;
    assert_eq!(s, 404);

    let (s, ev) = f.call(Method::GET, "/admin/events", &f.admin, None).await;
    assert_eq!(s, 200);
    let kinds: Vec<&str> = ev.as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"retired"), "events: {kinds:?}");
    f.h.shutdown().await;
}

#[tokio::test]
async fn audit_query_is_scoped_for_non_admins() {
    let f = Fixture::new().await;
    f.h.registry().deploy(ECHO_PROJECT.as_bytes(), "demo").await.unwrap();
    for key in [&f.admin, &f.user, &f.user] {
        f.c.get(f.service_url("/services/demo/mock/query/echo?who=q"))
            .header("api_key", key)
            .send()
            .await
            .unwrap();
    }
    f.h.gateway().auditor().flush().await;
    let (s, mine) = f.call(Method::GET, "/admin/audit", &f.user, None).await;
    assert_eq!(s, 200);
    assert_eq!(mine["total"], 2);
    let (s, _) = f.call(Method::GET, "/admin/audit?subject=root", &f.user, None).await;
    assert_eq!(s, 403);
    let (s, all) = f.call(Method::GET, "/admin/audit?limit=1", &f.admin, None).await;
    assert_eq!(s, 200);
    assert_eq!(all["total"], 3);
    assert_eq!(all["records"].as_array().unwrap().len(), 1);
    f.h.shutdown().await;
}

#[tokio::test]
async fn jwt_issuance_without_signing_key_is_unavailable() {
    let f = Fixture::new().await;
    let (s, body) = f.call(Method::POST, "/admin/jwt", &f.user, None).await;
    assert_eq!(s, 503, "{body}");
    f.h.shutdown().await;
}

#[tokio::test]
async fn status_reports_runtime_settings() {
    let f = Fixture::new().await;
    tokio::time::sleep(Duration::from_millis(10)).await;
    let (s, st) = f.call(Method::GET, "/admin/status", &f.user, None).await;
    assert_eq!(s, 200);
    assert_eq!(st["authentication"]["protocol"], "api_key");
    assert_eq!(st["caller"]["subject"], "alice");
    assert_eq!(st["consolePort"], f.h.console_addr().port());
    f.h.shutdown().await;
}
