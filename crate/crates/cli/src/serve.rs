use std::path::Path;

use anyhow::{bail, Context};
use datagate_core::model::{parse_server_config, ModelError, ServerConfig};
use datagate_server::{serve, ServerOptions};

use crate::args::ServeArgs;

/// Reads and parses a configuration file. Errors name the file and, for
/// syntax errors, quote the offending line.
pub fn load_config(path: &Path) -> anyhow::Result<ServerConfig> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read configuration file {}", path.display()))?;
    match parse_server_config(&bytes) {
        Ok(c) => Ok(c),
        Err(e) => bail!(
            "invalid configuration file {}: {e}{}",
            path.display(),
            line_context(&bytes, &e)
        ),
    }
}

fn line_context(bytes: &[u8], err: &ModelError) -> String {
    let (ModelError::MalformedDocument { line, column, .. }, Some(_)) = (err, err.line()) else {
        return String::new();
    };
    let text = String::from_utf8_lossy(bytes);
    let Some(src) = text.lines().nth(line - 1) else {
        return String::new();
    };
    let gutter = format!("{line:>4} | ");
    let caret = " ".repeat(gutter.len() + column.saturating_sub(1));
    format!("\n{gutter}{src}\n{caret}^")
}

/// Applies command-line overrides on top of the file's settings.
pub fn effective_config(args: &ServeArgs) -> anyhow::Result<ServerConfig> {
    let mut config = load_config(&args.config)?;
    if let Some(p) = &args.projects {
        config.projects_dir = Some(p.clone());
    }
    if let Some(d) = &args.log_dir {
        config.log_dir = Some(d.clone());
    }
    if let Some(s) = &args.store {
        config.store_path = Some(s.clone());
    }
    Ok(config)
}

pub async fn run(args: ServeArgs) -> anyhow::Result<()> {
    let config = effective_config(&args)?;
    let handle = serve(config, ServerOptions::default())
        .await
        .context("server failed to start")?;
    print!("{}", handle.banner());
    handle.wait_for_signal().await;
    Ok(())
}
