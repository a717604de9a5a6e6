//! Deterministic provider for tests and benchmarks.
//!
//! Query endpoints return one row `{echo: <query text>}`; mutating endpoints
//! return an affected count of 1. The optional descriptor key `delayMillis`
//! delays every response.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;

use super::{
    DataSourceProvider, ExecuteRequest, ProviderConnection, ProviderDescriptor, ProviderError,
    ProviderResult, Row,
};
use crate::model::{ConnectionDescriptor, EndpointKind};
use crate::template::SubstitutionMode;

pub const MOCK_PROVIDER_ID: &str = "MockProvider";

const SENT_LOG_CAP: usize = 10_000;

pub struct MockProvider {
    descriptor: ProviderDescriptor,
    sent: Arc<Mutex<Vec<String>>>,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl MockProvider {
    pub fn new() -> Self {
        Self::with_id(MOCK_PROVIDER_ID)
    }

    /// A mock registered under another id, e.g. to stand in for a backend
    /// that is not available locally.
    pub fn with_id(id: &str) -> Self {
        MockProvider {
            descriptor: ProviderDescriptor::new(id, SubstitutionMode::Raw, "mock"),
            sent: Arc::default(),
        }
    }

    /// Query texts received so far, oldest first (bounded).
    pub fn sent(&self) -> Vec<String> {
        self.sent.lock().expect("mock log poisoned").clone()
    }

    /// The result this provider returns for `request`, without delay.
    pub fn respond(request: &ExecuteRequest) -> ProviderResult {
        match request.kind {
            EndpointKind::Query => {
                let mut row = Row::new();
                row.insert("echo".into(), Value::String(request.query.text.clone()));
                ProviderResult::rows(vec![row])
            }
            _ => ProviderResult::affected(1),
        }
    }
}

#[async_trait]
impl DataSourceProvider for MockProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn validate(&self, descriptor: &ConnectionDescriptor) -> Result<(), ProviderError> {
        if let Some(v) = descriptor.get("delayMillis") {
            v.parse::<u64>().map_err(|_| {
                ProviderError::InvalidDescriptor("'delayMillis' must be an integer".into())
            })?;
        }
        Ok(())
    }

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError> {
        self.validate(descriptor)?;
        let delay = descriptor
            .get("delayMillis")
            .and_then(|v| v.parse().ok())
            .map(Duration::from_millis);
        Ok(Arc::new(MockConnection {
            delay,
            sent: Arc::clone(&self.sent),
        }))
    }
}

struct MockConnection {
    delay: Option<Duration>,
    sent: Arc<Mutex<Vec<String>>>,
}

#[async_trait]
impl ProviderConnection for MockConnection {
    async fn execute(&self, request: ExecuteRequest) -> Result<ProviderResult, ProviderError> {
        {
            let mut sent = self.sent.lock().expect("mock log poisoned");
            if sent.len() >= SENT_LOG_CAP {
                sent.remove(0);
            }
            sent.push(request.query.text.clone());
        }
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        Ok(MockProvider::respond(&request))
    }
}
