#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use datagate_core::model::ServerConfig;
use datagate_server::{ephemeral_config, serve, ServerHandle, ServerOptions};

pub const ECHO_PROJECT: &str = r#"{
  "name": "demo",
  "profiles": {
    "mock": {
      "providerId": "MockProvider",
      "queryEndpoints": {
        "echo": {
          "queryTemplate": "hello $who$",
          "bindVariables": [{"name": "who"}]
        },
        "secret": {
          "queryTemplate": "secret",
          "visibility": {"allowedRoles": ["admin"]}
        }
      }
    }
  }
}"#;

pub fn slow_project(delay_ms: u64) -> String {
    format!(
        r#"{{"name": "slow", "profiles": {{"mock": {{"providerId": "MockProvider",
            "dataSource": {{"delayMillis": "{delay_ms}"}},
            "queryEndpoints": {{"wait": {{"queryTemplate": "zzz"}}}}}}}}}}"#
    )
}

pub async fn start(config: ServerConfig) -> ServerHandle {
    serve(config, ServerOptions::default()).await.expect("server starts")
}

pub async fn start_default() -> ServerHandle {
    start(ephemeral_config()).await
}

pub fn write_project(dir: &Path, file: &str, body: &str) {
    let tmp = dir.join(format!(".{file}.tmp"));
    std::fs::write(&tmp, body).unwrap();
    std::fs::rename(&tmp, dir.join(file)).unwrap();
}

/// Polls `check` every 50 ms until it holds or `limit` passes.
pub async fn eventually<F, Fut>(limit: Duration, mut check: F) -> Option<Duration>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let start = Instant::now();
    while start.elapsed() < limit {
        if check().await {
            return Some(start.elapsed());
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    None
}
