use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "datagate", version, about = "Declarative data-service gateway")]
pub struct Cli {
    /// Default tracing filter when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the gateway and serve until SIGINT or SIGTERM.
    Serve(ServeArgs),
    /// Issue, revoke and list API keys, or mint JWTs.
    Keytool(KeytoolArgs),
    /// Drive concurrent load against one URL and report latencies.
    Loadgen(LoadgenArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Server configuration JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of project files to watch; overrides `projectsDir`.
    #[arg(long)]
    pub projects: Option<PathBuf>,
    /// Directory for the access log; overrides `logDir`.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// SQLite file for users, keys and audit; overrides `storePath`.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KeytoolArgs {
    /// Work directly on this store file (offline mode).
    #[arg(long, conflicts_with = "server", required_unless_present = "server")]
    pub store: Option<PathBuf>,
    /// Console URL of a running server (online mode), e.g. http://127.0.0.1:9100.
    #[arg(long)]
    pub server: Option<String>,
    /// Credential sent to the server in online mode.
    #[arg(long, requires = "server", env = "DATAGATE_ADMIN_KEY")]
    pub admin_key: Option<String>,
    #[command(subcommand)]
    pub action: KeyAction,
}

#[derive(Debug, Subcommand)]
pub enum KeyAction {
    /// Issue a new API key. The key is printed once and never stored.
    Issue {
        #[arg(long)]
        subject: String,
        /// Comma-separated roles; replaces the user's roles when given.
        #[arg(long, value_delimiter = ',')]
        roles: Option<Vec<String>>,
        /// Lifetime in seconds; omit for a key that never expires.
        #[arg(long)]
        ttl: Option<u64>,
    },
    /// Revoke a key by fingerprint.
    Revoke {
        #[arg(long)]
        fingerprint: String,
    },
    /// List keys, optionally for one subject.
    List {
        #[arg(long)]
        subject: Option<String>,
    },
    /// Mint an RS256 JWT.
    Jwt {
        #[arg(long)]
        subject: String,
        #[arg(long, value_delimiter = ',')]
        roles: Option<Vec<String>>,
        #[arg(long, default_value_t = 3600)]
        ttl: u64,
        /// PEM private key for offline signing.
        #[arg(long)]
        private_key: Option<PathBuf>,
        #[arg(long)]
        issuer: Option<String>,
        #[arg(long)]
        audience: Option<String>,
    },
}

#[derive(Debug, Args, Clone)]
pub struct LoadgenArgs {
    /// Full URL to request with GET.
    #[arg(long)]
    pub target: String,
    /// Concurrent workers.
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    /// Seconds over which worker start times are spread evenly.
    #[arg(long, default_value_t = 10.0)]
    pub rampup: f64,
    /// Total requests across all workers.
    #[arg(long, default_value_t = 10_000)]
    pub requests: u64,
    /// Per-second CSV time series output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Extra request header as `name: value`; repeatable.
    #[arg(long = "header")]
    pub headers: Vec<String>,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
}
