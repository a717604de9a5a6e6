//! Abstract base for SQL datasource providers.
//!
//! Concrete SQL providers implement [`SqlBackend`] (connect and execute) and
//! are wrapped in [`GenericSqlProvider`], which owns planning: templates are
//! always substituted in [`SubstitutionMode::SqlQuoted`].

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;

use super::{DataSourceProvider, ProviderConnection, ProviderDescriptor, ProviderError};
use crate::model::{ConnectionDescriptor, Endpoint};
use crate::template::{substitute, BoundQuery, SubstitutionMode, TemplateError};

pub const SQL_LANGUAGE: &str = "sql";

#[async_trait]
pub trait SqlBackend: Send + Sync + 'static {
    fn validate(&self, descriptor: &ConnectionDescriptor) -> Result<(), ProviderError>;

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError>;
}

/// Plans an endpoint the way every SQL provider does.
pub fn plan(endpoint: &Endpoint, params: &BTreeMap<String, String>) -> Result<BoundQuery, TemplateError> {
    let mut q = substitute(&endpoint.query_template, params, SubstitutionMode::SqlQuoted)?;
    q.provider_language = SQL_LANGUAGE.into();
    Ok(q)
}

pub struct GenericSqlProvider<B> {
    descriptor: ProviderDescriptor,
    backend: B,
}

impl<B: SqlBackend> GenericSqlProvider<B> {
    pub fn new(provider_id: impl Into<String>, backend: B) -> Self {
        GenericSqlProvider {
            descriptor: ProviderDescriptor::new(provider_id, SubstitutionMode::SqlQuoted, SQL_LANGUAGE),
            backend,
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

#[async_trait]
impl<B: SqlBackend> DataSourceProvider for GenericSqlProvider<B> {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn validate(&self, descriptor: &ConnectionDescriptor) -> Result<(), ProviderError> {
        self.backend.validate(descriptor)
    }

    async fn connect(
        &self,
        descriptor: &ConnectionDescriptor,
    ) -> Result<Arc<dyn ProviderConnection>, ProviderError> {
        self.backend.validate(descriptor)?;
        self.backend.connect(descriptor).await
    }

    fn plan(
        &self,
        endpoint: &Endpoint,
        params: &BTreeMap<String, String>,
    ) -> Result<BoundQuery, TemplateError> {
        plan(endpoint, params)
    }
}
