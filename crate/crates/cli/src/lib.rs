//! Process entry points: the server launcher, the key tool and the load
//! generator. `main.rs` only parses arguments and dispatches here, so the
//! same functions are callable from tests.

pub mod args;
pub mod keytool;
pub mod loadgen;
pub mod serve;

pub use args::{Cli, Command};

/// Runs one parsed command line to completion.
pub async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve(a) => serve::run(a).await,
        Command::Keytool(a) => keytool::run(a, &mut std::io::stdout()).await,
        Command::Loadgen(a) => loadgen::run_cli(a, &mut std::io::stdout()).await,
    }
}
