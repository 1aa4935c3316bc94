use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use tracing_subscriber::EnvFilter;

use rrpoll_server::{router, ActivePoll, AppState, ResponseLog, DEFAULT_PORT};

/// Collection server for locally private polls.
#[derive(Debug, Parser)]
#[command(name = "server", version)]
struct Args {
    /// Canonical poll JSON to serve.
    #[arg(long)]
    poll: Option<PathBuf>,
    /// Newline-delimited JSON response log (created if missing).
    #[arg(long)]
    log: PathBuf,
    #[arg(long, env = "RANDORI_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Failure probability used for accuracy annotations in /results.
    #[arg(long, default_value = "1/20", value_parser = rrpoll_server::parse_beta)]
    beta: f64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();

    let active = match &args.poll {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(ActivePoll::parse(&text).with_context(|| format!("loading {}", path.display()))?)
        }
        None => None,
    };
    let log = ResponseLog::open(&args.log).with_context(|| format!("opening {}", args.log.display()))?;
    tracing::info!(responses = log.len(), log = %args.log.display(), "response log loaded");

    let state = AppState::new(active, log, args.beta);
    let addr = SocketAddr::new(args.bind, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
