use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use hermes::control::{start_controller, ControllerOptions, Secrets, DEFAULT_POLL_INTERVAL};
use tracing::{error, info};

/// Serves node configs from a directory of `<node_id>.json` files.
#[derive(Parser)]
#[command(name = "hermes-controller", version)]
struct Args {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "0.0.0.0:7000")]
    listen: SocketAddr,
    /// JSON object of node id to passphrase.
    #[arg(long)]
    secrets: PathBuf,
    /// How often the store is checked for edits.
    #[arg(long, default_value_t = DEFAULT_POLL_INTERVAL.as_millis() as u64)]
    poll_ms: u64,
    /// Serve GET /nodes and POST /update/<id> here.
    #[arg(long)]
    admin: Option<SocketAddr>,
}

#[tokio::main]
async fn main() -> ExitCode {
    hermes_cli::init_tracing();
    let args = Args::parse();
    let secrets = match Secrets::load(&args.secrets) {
        Ok(s) => s,
        Err(e) => {
            error!("{}: {e}", args.secrets.display());
            return ExitCode::FAILURE;
        }
    };
    let handle = match start_controller(ControllerOptions {
        store_dir: args.store,
        listen: args.listen,
        secrets,
        poll_interval: Duration::from_millis(args.poll_ms.max(1)),
        admin: args.admin,
    })
    .await
    {
        Ok(h) => h,
        Err(e) => {
            error!("starting controller: {e}");
            return ExitCode::FAILURE;
        }
    };
    info!("controller on {}", handle.addr);
    if let Some(a) = handle.admin_addr {
        info!("admin on {a}");
    }
    hermes_cli::ctrl_c().await;
    handle.shutdown();
    ExitCode::SUCCESS
}
