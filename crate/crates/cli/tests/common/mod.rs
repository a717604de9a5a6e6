#![allow(dead_code)]

use std::path::PathBuf;

use datagate_core::model::AuthProtocol;
use datagate_core::store::{AuditFilter, AuditStore};
use datagate_server::{ephemeral_config, serve, ServerHandle, ServerOptions};
use tempfile::TempDir;

pub const ECHO_PROJECT: &str = r#"{
  "name": "demo",
  "profiles": {
    "mock": {
      "providerId": "MockProvider",
      "queryEndpoints": {"echo": {"queryTemplate": "hello"}}
    }
  }
}"#;

pub struct Server {
    pub handle: ServerHandle,
    pub dir: TempDir,
}

impl Server {
    pub async fn start(api_keys: bool) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ephemeral_config();
        c.store_path = Some(dir.path().join("gateway.db"));
        c.enable_authentication = api_keys;
        c.authentication_protocol = AuthProtocol::ApiKey;
        let handle = serve(c, ServerOptions::default()).await.unwrap();
        handle.registry().deploy(ECHO_PROJECT.as_bytes(), "demo").await.unwrap();
        Server { handle, dir }
    }

    pub fn echo_url(&self) -> String {
        format!("{}/services/demo/mock/query/echo", self.handle.service_url())
    }

    pub fn store_path(&self) -> PathBuf {
        self.dir.path().join("gateway.db")
    }

    pub async fn audit_count(&self) -> u64 {
        self.handle.gateway().auditor().flush().await;
        self.handle.store().count_audit(&AuditFilter::default()).unwrap()
    }
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_datagate"))
}
