//! Core of a declarative data-service gateway.
//!
//! Projects (JSON files) declare data provider profiles and named
//! query, submit, update and delete endpoints over them. Each endpoint is
//! served at `/services/{project}/{provider}/{kind}/{endpoint}` and runs
//! through authentication, authorization, rate limiting, modifier chains,
//! provider execution, output formatting and auditing.
//!
//! This crate holds everything except the HTTP transport: the model and
//! its parsers, templates, the provider and modifier SPIs with built-ins,
//! security, persistence, the hot-reloading project registry and the
//! transport-independent request pipeline ([`pipeline::Gateway`]).

pub mod clock;
pub mod format;
pub mod model;
pub mod modifier;
pub mod pipeline;
pub mod provider;
pub mod registry;
pub mod security;
pub mod store;
pub mod template;
