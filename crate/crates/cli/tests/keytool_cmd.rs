mod common;

use common::*;
use datagate_cli::args::KeyAction;
use datagate_cli::keytool::{offline, online};
use datagate_core::security::JwtVerifier;
use datagate_core::store::{CredentialStore, SqliteStore};

const KEYS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/keys");

fn issue(subject: &str, roles: Option<Vec<&str>>) -> KeyAction {
    KeyAction::Issue {
        subject: subject.into(),
        roles: roles.map(|r| r.into_iter().map(String::from).collect()),
        ttl: None,
    }
}

fn field(text: &str, name: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(name))
        .unwrap_or_else(|| panic!("no {name} in {text}"))
        .trim()
        .to_string()
}

fn run_offline(store: &SqliteStore, action: KeyAction) -> anyhow::Result<String> {
    let mut out = Vec::new();
    offline(store, action, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

#[test]
fn empty_store_lists_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let store = SqliteStore::open(dir.path().join("k.db")).unwrap();
    let text = run_offline(&store, KeyAction::List { subject: None }).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("FINGERPRINT"));
}

#[test]
fn issued_key_appears_in_list_and_revoke_marks_it() {
    let dir = tempfile::tempdir().unwrap();
    let store = SqliteStore::open(dir.path().join("k.db")).unwrap();
    let text = run_offline(&store, issue("alice", Some(vec!["staff", "admin"]))).unwrap();
    let fp = field(&text, "fingerprint:");
    assert_eq!(field(&text, "roles:"), "admin,staff");
    assert_eq!(field(&text, "key:").len(), 43);
    assert_eq!(store.get_user("alice").unwrap().roles.len(), 2);

    let list = run_offline(&store, KeyAction::List { subject: None }).unwrap();
    let row = list.lines().find(|l| l.starts_with(&fp)).expect("fingerprint listed");
    assert!(row.ends_with("no"));
    run_offline(&store, KeyAction::Revoke { fingerprint: fp.clone() }).unwrap();
    let list = run_offline(&store, KeyAction::List { subject: Some("alice".into()) }).unwrap();
    assert!(list.lines().find(|l| l.starts_with(&fp)).unwrap().ends_with("yes"));

    let err = run_offline(&store, KeyAction::Revoke { fingerprint: "nope".into() }).unwrap_err();
    assert_eq!(err.to_string(), "unknown fingerprint 'nope'");
}

#[test]
fn offline_jwt_verifies_with_the_public_key() {
    let dir = tempfile::tempdir().unwrap();
    let store = SqliteStore::open(dir.path().join("k.db")).unwrap();
    run_offline(&store, issue("bob", Some(vec!["staff"]))).unwrap();
    let token = run_offline(
        &store,
        KeyAction::Jwt {
            subject: "bob".into(),
            roles: None,
            ttl: 600,
            private_key: Some(format!("{KEYS}/primary_private.pem").into()),
            issuer: None,
            audience: None,
        },
    )
    .unwrap();
    let pem = std::fs::read(format!("{KEYS}/primary_public.pem")).unwrap();
    let claims = JwtVerifier::from_pem(&pem, None, None)
        .unwrap()
        .verify(token.trim(), chrono::Utc::now())
        .unwrap();
    assert_eq!(claims.sub, "bob");
    assert!(claims.roles.contains("staff"));
}

#[tokio::test(flavor = "multi_thread")]
async fn revoked_key_no_longer_authenticates() {
    let s = Server::start(true).await;
    let client = reqwest::Client::new();
    let call = |key: String| {
        let client = client.clone();
        let url = s.echo_url();
        async move { client.get(url).header("api_key", key).send().await.unwrap().status().as_u16() }
    };

    // Bootstrap an administrator offline, then work online.
    let store = SqliteStore::open(s.store_path()).unwrap();
    let admin = field(&run_offline(&store, issue("root", Some(vec!["admin"]))).unwrap(), "key:");

    let mut out = Vec::new();
    online(&s.handle.console_url(), Some(&admin), issue("carol", None), &mut out).await.unwrap();
    let text = String::from_utf8(out).unwrap();
    let (key, fp) = (field(&text, "key:"), field(&text, "fingerprint:"));
    assert_eq!(call(key.clone()).await, 200);

    let mut out = Vec::new();
    online(&s.handle.console_url(), Some(&admin), KeyAction::List { subject: Some("carol".into()) }, &mut out)
        .await
        .unwrap();
    assert!(String::from_utf8(out).unwrap().contains(&fp));

    let mut out = Vec::new();
    online(&s.handle.console_url(), Some(&admin), KeyAction::Revoke { fingerprint: fp }, &mut out)
        .await
        .unwrap();
    assert_eq!(call(key).await, 401);

    let mut out = Vec::new();
    let err = online(&s.handle.console_url(), Some(&admin), KeyAction::Revoke { fingerprint: "zz".into() }, &mut out)
        .await
        .unwrap_err();
    assert_eq!(err.to_string(), "unknown fingerprint 'zz'");
    let err = online(&s.handle.console_url(), None, KeyAction::List { subject: None }, &mut Vec::new())
        .await
        .unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
}

#[test]
fn binary_issue_then_list() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("k.db");
    let db = db.to_str().unwrap();
    let out = bin().args(["keytool", "--store", db, "issue", "--subject", "dave", "--roles", "staff", "--ttl", "60"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fp = field(&String::from_utf8_lossy(&out.stdout), "fingerprint:");
    let out = bin().args(["keytool", "--store", db, "list"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains(&fp));
    let out = bin().args(["keytool", "--store", db, "revoke", "--fingerprint", "missing"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown fingerprint"));
}
