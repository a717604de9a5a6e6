//! HTTP transport for the gateway.
//!
//! [`serve`] binds two listeners: the service port answers
//! `/services/...` through the core pipeline, and the console port answers
//! the `/admin/...` REST API (plus optional static console assets). Neither
//! port routes the other's paths.

mod admin;
mod service;

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use datagate_core::clock::{Clock, SystemClock};
use datagate_core::model::{AuditMode, AuthProtocol, Protocol, ServerConfig};
use datagate_core::modifier::ModifierRegistry;
use datagate_core::pipeline::{Gateway, GatewaySettings};
use datagate_core::provider::ProviderRegistry;
use datagate_core::registry::ProjectRegistry;
use datagate_core::security::{Authenticator, JwtIssuer, JwtVerifier, RateLimiter};
use datagate_core::store::{Auditor, RollingLog, SqliteStore, StoreError};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{info, warn};

pub use admin::admin_router;
pub use service::service_router;

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

pub const ACCESS_LOG_NAME: &str = "access.log";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("port {port} on {host} is already in use")]
    PortInUse { host: String, port: u16 },
    #[error("protocol https requires externalTlsTerminator: TLS must be terminated in front of this server")]
    TlsNotTerminated,
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pluggable pieces; defaults are the built-ins and the system clock.
pub struct ServerOptions {
    pub providers: Arc<ProviderRegistry>,
    pub modifiers: Arc<ModifierRegistry>,
    pub clock: Arc<dyn Clock>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            providers: Arc::new(ProviderRegistry::with_builtins()),
            modifiers: Arc::new(ModifierRegistry::with_builtins()),
            clock: Arc::new(SystemClock),
        }
    }
}

/// Shared state of a running instance.
pub struct AppState {
    pub config: ServerConfig,
    pub gateway: Arc<Gateway>,
    pub store: Arc<SqliteStore>,
    pub issuer: Option<JwtIssuer>,
    pub started: Instant,
    pub service_addr: SocketAddr,
    pub console_addr: SocketAddr,
}

pub struct ServerHandle {
    state: Arc<AppState>,
    stop: watch::Sender<bool>,
    servers: Vec<JoinHandle<std::io::Result<()>>>,
    watcher: Option<JoinHandle<()>>,
}

fn read_pem(path: &PathBuf, what: &str) -> Result<Vec<u8>, ServerError> {
    std::fs::read(path)
        .map_err(|e| ServerError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

async fn bind(host: IpAddr, port: u16) -> Result<TcpListener, ServerError> {
    TcpListener::bind((host, port)).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServerError::PortInUse {
                host: host.to_string(),
                port,
            }
        } else {
            ServerError::Io(e)
        }
    })
}

/// Builds every component from `config` and starts both listeners.
pub async fn serve(config: ServerConfig, options: ServerOptions) -> Result<ServerHandle, ServerError> {
    if config.protocol == Protocol::Https && !config.external_tls_terminator {
        return Err(ServerError::TlsNotTerminated);
    }
    let host: IpAddr = config
        .host
        .parse()
        .map_err(|e| ServerError::Config(format!("host '{}': {e}", config.host)))?;

    let store = Arc::new(match &config.store_path {
        Some(p) => SqliteStore::open(p)?,
        None => SqliteStore::open_in_memory()?,
    });

    let verifier = match (&config.jwt.public_key_path, config.authentication_protocol) {
        (Some(path), _) => Some(
            JwtVerifier::from_pem(
                &read_pem(path, "JWT public key")?,
                config.jwt.issuer.clone(),
                config.jwt.audience.clone(),
            )
            .map_err(|e| ServerError::Config(e.to_string()))?,
        ),
        (None, AuthProtocol::Jwt) if config.enable_authentication => {
            warn!("jwt authentication is enabled but no public key is configured; every token will be rejected");
            None
        }
        (None, _) => None,
    };
    let issuer = match &config.jwt.private_key_path {
        Some(path) => Some(
            JwtIssuer::from_pem(
                &read_pem(path, "JWT private key")?,
                config.jwt.issuer.clone(),
                config.jwt.audience.clone(),
            )
            .map_err(|e| ServerError::Config(e.to_string()))?,
        ),
        None => None,
    };

    let auth = Arc::new(Authenticator::new(
        config.enable_authentication,
        config.authentication_protocol,
        store.clone(),
        verifier,
        config.auth_cache_ttl(),
        options.clock.clone(),
    ));
    let limiter = Arc::new(RateLimiter::new(config.rate_limit.clone()));
    let auditor = if config.enable_audit {
        let log = match &config.log_dir {
            Some(dir) => Some(RollingLog::open(dir, ACCESS_LOG_NAME)?),
            None => None,
        };
        Auditor::start(
            store.clone(),
            log,
            config.audit_mode,
            config.audit_flush_interval,
            &config.instance_name,
        )?
    } else {
        Auditor::disabled()
    };
    let registry = Arc::new(ProjectRegistry::new(
        options.providers,
        options.modifiers,
        config.projects_dir.clone(),
    ));
    if let Some(dir) = &config.projects_dir {
        std::fs::create_dir_all(dir)?;
        registry.poll().await;
    }
    let gateway = Gateway::new(
        GatewaySettings {
            enable_authorization: config.enable_authorization,
            instance_name: config.instance_name.clone(),
        },
        registry.clone(),
        auth,
        limiter,
        Arc::new(auditor),
    );

    let service_listener = bind(host, config.service_port).await?;
    let console_listener = bind(host, config.console_port).await?;
    let service_addr = service_listener.local_addr()?;
    let console_addr = console_listener.local_addr()?;

    let state = Arc::new(AppState {
        config,
        gateway,
        store,
        issuer,
        started: Instant::now(),
        service_addr,
        console_addr,
    });

    let (stop, stop_rx) = watch::channel(false);
    let mut servers = Vec::new();
    for (listener, router) in [
        (service_listener, service_router(state.clone())),
        (console_listener, admin_router(state.clone())),
    ] {
        let mut rx = stop_rx.clone();
        servers.push(tokio::spawn(async move {
            axum::serve(
                listener,
                router.into_make_service_with_connect_info::<SocketAddr>(),
            )
            .with_graceful_shutdown(async move {
                let _ = rx.wait_for(|s| *s).await;
            })
            .await
        }));
    }
    let watcher = state
        .config
        .projects_dir
        .is_some()
        .then(|| registry.spawn_watcher(state.config.reload_interval, stop_rx.clone()));

    let handle = ServerHandle {
        state,
        stop,
        servers,
        watcher,
    };
    info!(service = %service_addr, console = %console_addr, "gateway started");
    Ok(handle)
}

impl ServerHandle {
    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.state.gateway
    }

    pub fn registry(&self) -> &Arc<ProjectRegistry> {
        self.state.gateway.registry()
    }

    pub fn store(&self) -> &Arc<SqliteStore> {
        &self.state.store
    }

    pub fn service_addr(&self) -> SocketAddr {
        self.state.service_addr
    }

    pub fn console_addr(&self) -> SocketAddr {
        self.state.console_addr
    }

    pub fn service_url(&self) -> String {
        format!("http://{}", self.state.service_addr)
    }

    pub fn console_url(&self) -> String {
        format!("http://{}", self.state.console_addr)
    }

    /// Human-readable startup summary.
    pub fn banner(&self) -> String {
        let c = &self.state.config;
        let auth = if c.enable_authentication {
            format!("{} (enabled)", c.authentication_protocol.as_str())
        } else {
            "disabled".to_string()
        };
        let audit = match (c.enable_audit, c.audit_mode) {
            (false, _) => "disabled".to_string(),
            (true, AuditMode::Sync) => "sync (durable before response)".to_string(),
            (true, AuditMode::Buffered) => format!(
                "buffered (flushed at least every {} ms)",
                c.audit_flush_interval.as_millis()
            ),
        };
        let projects = self.registry().snapshot().len();
        format!(
            "datagate {} instance '{}'\n  service port : {} (http://{}/services/)\n  console port : {} (http://{}/admin/)\n  authentication: {}\n  authorization : {}\n  audit         : {}\n  projects      : {} loaded{}\n",
            env!("CARGO_PKG_VERSION"),
            c.instance_name,
            self.state.service_addr.port(),
            self.state.service_addr,
            self.state.console_addr.port(),
            self.state.console_addr,
            auth,
            if c.enable_authorization { "enabled" } else { "disabled" },
            audit,
            projects,
            c.projects_dir
                .as_ref()
                .map(|d| format!(" from {}", d.display()))
                .unwrap_or_default(),
        )
    }

    /// Stops accepting connections, lets in-flight requests finish for up to
    /// the configured grace period, then flushes the audit trail.
    pub async fn shutdown(mut self) {
        let _ = self.stop.send(true);
        let grace = self.state.config.shutdown_grace;
        let deadline = tokio::time::Instant::now() + grace;
        for server in &mut self.servers {
            match tokio::time::timeout_at(deadline, &mut *server).await {
                Ok(Ok(Ok(()))) => {}
                Ok(Ok(Err(e))) => warn!(error = %e, "listener stopped with an error"),
                Ok(Err(e)) => warn!(error = %e, "listener task failed"),
                Err(_) => {
                    warn!(grace_secs = grace.as_secs_f64(), "grace period elapsed; aborting remaining connections");
                    server.abort();
                }
            }
        }
        if let Some(w) = self.watcher.take() {
            let _ = w.await;
        }
        let auditor = Arc::clone(self.state.gateway.auditor());
        let _ = tokio::task::spawn_blocking(move || auditor.shutdown()).await;
        info!("gateway stopped");
    }

    /// Runs until SIGINT or SIGTERM, then shuts down gracefully.
    pub async fn wait_for_signal(self) {
        shutdown_signal().await;
        self.shutdown().await;
    }
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Convenience for tests: a config bound to ephemeral loopback ports.
pub fn ephemeral_config() -> ServerConfig {
    let mut c = ServerConfig::local(0, 0);
    c.shutdown_grace = Duration::from_secs(10);
    c
}
