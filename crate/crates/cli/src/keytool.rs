use std::collections::BTreeSet;
use std::io::Write;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use chrono::{DateTime, Utc};
use datagate_core::security::{issue_api_key, JwtIssuer};
use datagate_core::store::{ApiKeyRecord, CredentialStore, SqliteStore, StoreError};
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

use crate::args::{KeyAction, KeytoolArgs};

pub async fn run(args: KeytoolArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    match (&args.store, &args.server) {
        (Some(path), _) => {
            let store = SqliteStore::open(path)
                .with_context(|| format!("cannot open store {}", path.display()))?;
            offline(&store, args.action, out)
        }
        (None, Some(url)) => online(url, args.admin_key.as_deref(), args.action, out).await,
        (None, None) => bail!("either --store or --server is required"),
    }
}

fn role_set(roles: Option<Vec<String>>) -> Option<BTreeSet<String>> {
    roles.map(|r| r.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
}

fn store_error(e: StoreError, fingerprint: Option<&str>) -> anyhow::Error {
    match (e, fingerprint) {
        (StoreError::NotFound(_), Some(f)) => anyhow!("unknown fingerprint '{f}'"),
        (e, _) => anyhow!(e),
    }
}

/// Direct store access. Revocations reach a running server once its
/// credential cache entry expires.
pub fn offline(store: &SqliteStore, action: KeyAction, out: &mut dyn Write) -> anyhow::Result<()> {
    match action {
        KeyAction::Issue { subject, roles, ttl } => {
            let issued = issue_api_key(
                store,
                &subject,
                role_set(roles),
                ttl.map(Duration::from_secs),
                Utc::now(),
            )
            .map_err(|e| store_error(e, None))?;
            let v = serde_json::to_value(&issued)?;
            print_issued(&v, out)
        }
        KeyAction::Revoke { fingerprint } => {
            let rec = store
                .revoke_api_key(&fingerprint)
                .map_err(|e| store_error(e, Some(&fingerprint)))?;
            writeln!(out, "revoked {} (subject {})", rec.fingerprint, rec.subject)?;
            Ok(())
        }
        KeyAction::List { subject } => {
            let keys = store.list_api_keys(subject.as_deref()).map_err(|e| store_error(e, None))?;
            print_table(&keys, out)
        }
        KeyAction::Jwt {
            subject,
            roles,
            ttl,
            private_key,
            issuer,
            audience,
        } => {
            let path = private_key.ok_or_else(|| anyhow!("offline JWT issuance needs --private-key"))?;
            let pem = std::fs::read(&path)
                .with_context(|| format!("cannot read private key {}", path.display()))?;
            let signer = JwtIssuer::from_pem(&pem, issuer, audience)?;
            let roles = match role_set(roles) {
                Some(r) => r,
                None => match store.get_user(&subject) {
                    Ok(u) => u.roles,
                    Err(StoreError::NotFound(_)) => BTreeSet::new(),
                    Err(e) => return Err(e.into()),
                },
            };
            let token = signer.issue(&subject, &roles, Duration::from_secs(ttl), Utc::now())?;
            writeln!(out, "{token}")?;
            Ok(())
        }
    }
}

fn print_issued(v: &Value, out: &mut dyn Write) -> anyhow::Result<()> {
    let field = |k: &str| v.get(k).and_then(Value::as_str).unwrap_or("-").to_string();
    let roles: Vec<&str> = v
        .get("roles")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    writeln!(out, "key:         {}", field("key"))?;
    writeln!(out, "fingerprint: {}", field("fingerprint"))?;
    writeln!(out, "subject:     {}", field("subject"))?;
    writeln!(out, "roles:       {}", roles.join(","))?;
    writeln!(out, "expires:     {}", v.get("expiresAt").and_then(Value::as_str).unwrap_or("never"))?;
    writeln!(out, "The key is shown only once; store it now.")?;
    Ok(())
}

fn fmt_time(t: Option<DateTime<Utc>>) -> String {
    t.map_or_else(|| "never".into(), |t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}

/// Fixed-width table; an empty list prints just the header.
pub fn print_table(keys: &[ApiKeyRecord], out: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(
        out,
        "{:<24} {:<20} {:<20} {:<20} {}",
        "FINGERPRINT", "SUBJECT", "ISSUED", "EXPIRES", "REVOKED"
    )?;
    for k in keys {
        writeln!(
            out,
            "{:<24} {:<20} {:<20} {:<20} {}",
            k.fingerprint,
            k.subject,
            fmt_time(Some(k.issued_at)),
            fmt_time(k.expires_at),
            if k.revoked { "yes" } else { "no" }
        )?;
    }
    Ok(())
}

async fn call(
    client: &Client,
    base: &str,
    key: Option<&str>,
    method: Method,
    path: &str,
    body: Option<Value>,
) -> anyhow::Result<Value> {
    let url = format!("{}{path}", base.trim_end_matches('/'));
    let mut req = client.request(method, &url);
    if let Some(k) = key {
        req = req.header("api_key", k);
    }
    if let Some(b) = body {
        req = req
            .header("content-type", "application/json")
            .body(b.to_string());
    }
    let resp = req.send().await.with_context(|| format!("cannot reach {url}"))?;
    let status = resp.status();
    let text = resp.text().await?;
    let v: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
    if !status.is_success() {
        let detail = v.get("detail").and_then(Value::as_str).unwrap_or("");
        if status == StatusCode::NOT_FOUND && path.starts_with("/admin/keys/") {
            bail!("unknown fingerprint '{}'", &path["/admin/keys/".len()..]);
        }
        bail!("server answered {status}: {detail}");
    }
    Ok(v)
}

/// Same actions through the admin API of a running server.
pub async fn online(
    base: &str,
    key: Option<&str>,
    action: KeyAction,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let client = Client::new();
    match action {
        KeyAction::Issue { subject, roles, ttl } => {
            let mut body = json!({"subject": subject});
            if let Some(r) = role_set(roles) {
                body["roles"] = json!(r);
            }
            if let Some(t) = ttl {
                body["ttlSeconds"] = json!(t);
            }
            let v = call(&client, base, key, Method::POST, "/admin/keys", Some(body)).await?;
            print_issued(&v, out)
        }
        KeyAction::Revoke { fingerprint } => {
            let path = format!("/admin/keys/{fingerprint}");
            let v = call(&client, base, key, Method::DELETE, &path, None).await?;
            let rec: ApiKeyRecord = serde_json::from_value(v)?;
            writeln!(out, "revoked {} (subject {})", rec.fingerprint, rec.subject)?;
            Ok(())
        }
        KeyAction::List { subject } => {
            let path = match subject {
                Some(s) => {
                    let mut u = reqwest::Url::parse("http://x/admin/keys")?;
                    u.query_pairs_mut().append_pair("subject", &s);
                    format!("/admin/keys?{}", u.query().unwrap_or_default())
                }
                None => "/admin/keys".to_string(),
            };
            let v = call(&client, base, key, Method::GET, &path, None).await?;
            let keys: Vec<ApiKeyRecord> = serde_json::from_value(v)?;
            print_table(&keys, out)
        }
        KeyAction::Jwt { subject, roles, ttl, private_key, .. } => {
            if private_key.is_some() {
                bail!("--private-key is for offline mode; the server signs with its own key");
            }
            let mut body = json!({"subject": subject, "ttlSeconds": ttl});
            if let Some(r) = role_set(roles) {
                body["roles"] = json!(r);
            }
            let v = call(&client, base, key, Method::POST, "/admin/jwt", Some(body)).await?;
            writeln!(out, "{}", v.get("token").and_then(Value::as_str).unwrap_or_default())?;
            Ok(())
        }
    }
}
