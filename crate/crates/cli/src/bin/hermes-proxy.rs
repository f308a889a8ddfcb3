use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hermes::control::run_agent;
use hermes::model::NodeConfig;
use hermes::proxy::Proxy;
use tokio::net::TcpListener;
use tracing::{error, info};

/// Runs one overlay proxy, configured by a controller.
#[derive(Parser)]
#[command(name = "hermes-proxy", version)]
struct Args {
    /// Node id this proxy registers as.
    #[arg(long)]
    id: String,
    /// Controller address, host:port.
    #[arg(long)]
    controller: String,
    #[arg(long, env = "HERMES_PASSPHRASE")]
    passphrase: String,
    /// Config to run until the controller pushes one.
    #[arg(long)]
    bootstrap: Option<PathBuf>,
    /// Serve /stats and /config_version here.
    #[arg(long)]
    admin: Option<SocketAddr>,
}

#[tokio::main]
async fn main() -> ExitCode {
    hermes_cli::init_tracing();
    let args = Args::parse();
    let proxy = Proxy::new(args.id.clone());
    if let Some(path) = &args.bootstrap {
        let cfg = match std::fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| NodeConfig::from_json(&t).map_err(|e| e.to_string())) {
            Ok(cfg) => cfg,
            Err(e) => {
                error!("bootstrap {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        };
        if cfg.node_id != args.id {
            error!("bootstrap is for node {:?}, not {:?}", cfg.node_id, args.id);
            return ExitCode::FAILURE;
        }
        if let Err(e) = proxy.swap_config(cfg).await {
            error!("bootstrap rejected: {e}");
            return ExitCode::FAILURE;
        }
    }
    if let Some(addr) = args.admin {
        match TcpListener::bind(addr).await {
            Ok(l) => {
                info!("admin on {}", l.local_addr().map(|a| a.to_string()).unwrap_or_default());
                let p = proxy.clone();
                tokio::spawn(async move { p.serve_admin(l).await });
            }
            Err(e) => {
                error!("admin bind {addr}: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    let agent = tokio::spawn(run_agent(proxy.clone(), args.controller, args.passphrase));
    tokio::select! {
        _ = hermes_cli::ctrl_c() => {
            info!("shutting down");
            proxy.shutdown();
            ExitCode::SUCCESS
        }
        res = agent => match res {
            Ok(Ok(())) => ExitCode::SUCCESS,
            Ok(Err(e)) => {
                error!("agent: {e}");
                proxy.shutdown();
                ExitCode::FAILURE
            }
            Err(e) => {
                error!("agent task: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
