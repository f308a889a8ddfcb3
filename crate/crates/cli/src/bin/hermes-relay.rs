use std::net::SocketAddr;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use hermes::model::Transport;
use hermes::netsim::{DownBehavior, ImpairmentSpec, LinkSchedule, Relay, RelaySpec};
use tracing::{error, info};

#[derive(Clone, Copy, ValueEnum)]
enum Proto {
    Tcp,
    Udp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnDown {
    Stall,
    Reset,
}

/// Forwards one port to another with loss, latency and a link schedule.
#[derive(Parser)]
#[command(name = "hermes-relay", version)]
struct Args {
    #[arg(long)]
    listen: SocketAddr,
    #[arg(long)]
    forward: SocketAddr,
    /// Datagram drop probability, UDP only.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    /// group:index:slot_ms:epoch_ms; the link is up in slot `index` of every
    /// `group` slots counted from the epoch.
    #[arg(long)]
    sched: Option<LinkSchedule>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "tcp")]
    proto: Proto,
    /// What established TCP connections see while the link is down.
    #[arg(long, value_enum, default_value = "stall")]
    on_down: OnDown,
}

#[tokio::main]
async fn main() -> ExitCode {
    hermes_cli::init_tracing();
    let args = Args::parse();
    if !(0.0..=1.0).contains(&args.loss) {
        error!("--loss must be within 0..=1");
        return ExitCode::FAILURE;
    }
    let spec = RelaySpec {
        listen: args.listen,
        forward: args.forward,
        transport: match args.proto {
            Proto::Tcp => Transport::Tcp,
            Proto::Udp => Transport::Udp,
        },
        impairment: ImpairmentSpec {
            loss_rate: args.loss,
            latency: Duration::from_millis(args.latency_ms),
            schedule: args.sched,
            seed: args.seed,
            on_down: match args.on_down {
                OnDown::Stall => DownBehavior::Stall,
                OnDown::Reset => DownBehavior::Reset,
            },
        },
    };
    let relay = match Relay::start(spec).await {
        Ok(r) => r,
        Err(e) => {
            error!("starting relay: {e}");
            return ExitCode::FAILURE;
        }
    };
    info!("relaying {} -> {}", relay.local_addr(), args.forward);
    hermes_cli::ctrl_c().await;
    relay.shutdown();
    info!("stats {}", serde_json::to_string(relay.stats()).unwrap_or_default());
    ExitCode::SUCCESS
}
