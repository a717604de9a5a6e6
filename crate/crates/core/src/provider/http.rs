//! Pass-through provider for web data sources.
//!
//! The bound query text is a path and query string appended verbatim to the
//! descriptor's `baseUrl`. The endpoint kind picks the upstream verb, the
//! same one the caller used. Caller headers are forwarded only when named in
//! the comma-separated `forwardHeaders` allow-list.

use std::sync::Arc;

use async_trait::async_trait;
use reqwest::{Client, Method, Url};

use super::{
    check_keys, DataSourceProvider, ExecuteRequest, ProviderConnection, ProviderDescriptor,
    ProviderError, ProviderResult, ResultStatus,
};
use crate::model::{ConnectionDescriptor, EndpointKind};
use crate::template::SubstitutionMode;

pub const HTTP_PROVIDER_ID: &str = "HTTPProvider";

const KEYS: &[&str] = &["baseUrl", "forwardHeaders"];

pub struct HttpProvider {
    descriptor: ProviderDescriptor,
    client: Client,
}

impl Default for HttpProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpProvider {
    pub fn new() -> Self {
        HttpProvider {
            descriptor: ProviderDescriptor::new(HTTP_PROVIDER_ID, SubstitutionMode::Raw, "http"),
            client: Client::builder()
                .pool_max_idle_per_host(32)
                .build()
                .expect("static client configuration"),
        }
    }
}

#[async_trait]
impl DataSourceProvider for HttpProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn validate(&self, descriptor: &ConnectionDescriptor) -> Result<(), ProviderError> {
        check_keys(descriptor, KEYS)?;
        let base = descriptor
            .get("baseUrl")
            .ok_or_else(|| ProviderError::InvalidDescriptor("'baseUrl' is required".into()))?;
        let url = Url::parse(base)
            .map_err(|e| ProviderError::InvalidDescriptor(format!("bad baseUrl: {e}")))?;
        if url.scheme() != "http" && url.scheme() != "https" {
            return Err(ProviderError::InvalidDescriptor(
                "baseUrl must be an http(s) URL".into(),
            ));
        }
        Ok(())
    }

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError> {
        self.validate(descriptor)?;
        let base = descriptor
            .get("baseUrl")
            .unwrap_or_default()
            .trim_end_matches('/')
            .to_string();
        let forward = descriptor
            .get("forwardHeaders")
            .map(|s| {
                s.split(',')
                    .map(|h| h.trim().to_ascii_lowercase())
                    .filter(|h| !h.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        Ok(Arc::new(HttpConnection {
            client: self.client.clone(),
            base,
            forward,
        }))
    }
}

struct HttpConnection {
    client: Client,
    base: String,
    forward: Vec<String>,
}

impl HttpConnection {
    fn target(&self, text: &str) -> String {
        if text.is_empty() || text.starts_with('/') || text.starts_with('?') {
            format!("{}{}", self.base, text)
        } else {
            format!("{}/{}", self.base, text)
        }
    }
}

#[async_trait]
impl ProviderConnection for HttpConnection {
    async fn execute(&self, request: ExecuteRequest) -> Result<ProviderResult, ProviderError> {
        let method = match request.kind {
            EndpointKind::Query => Method::GET,
            EndpointKind::Submit => Method::POST,
            EndpointKind::Update => Method::PUT,
            EndpointKind::Delete => Method::DELETE,
        };
        let url = self.target(&request.query.text);
        let mut builder = self.client.request(method, &url);
        for name in &self.forward {
            if let Some(v) = request.headers.get(name) {
                builder = builder.header(name.as_str(), v.as_str());
            }
        }
        if let Some(body) = request.payload {
            builder = builder.body(body);
        }
        let response = builder.send().await.map_err(map_error)?;
        let status = response.status().as_u16();
        let content_type = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let body = response.bytes().await.map_err(map_error)?.to_vec();
        let mut result = ProviderResult::binary(body, content_type);
        result.upstream_status = Some(status);
        if status >= 400 {
            result.status = ResultStatus::Error;
        }
        Ok(result)
    }
}

fn map_error(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else if e.is_connect() {
        ProviderError::ConnectionRefused(e.to_string())
    } else {
        ProviderError::ConnectionLost(e.to_string())
    }
}
