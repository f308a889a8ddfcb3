use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tracing::{debug, info, warn};

use crate::proxy::Proxy;
use crate::wire::{decode_control, encode_control, ControlMsg};

const MIN_BACKOFF: Duration = Duration::from_millis(100);
const MAX_BACKOFF: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("controller rejected node: {0}")]
    Rejected(String),
}

/// Keeps `proxy` connected to the controller at `controller` and applies
/// every pushed config. Reconnects with backoff after any disconnect and
/// returns once the proxy shuts down, or with an error if the controller
/// rejects the node's credentials.
pub async fn run_agent(proxy: Proxy, controller: String, passphrase: String) -> Result<(), AgentError> {
    let stop = proxy.shutdown_token();
    let mut backoff = MIN_BACKOFF;
    loop {
        let session = async {
            let stream = TcpStream::connect(&controller).await.map_err(|e| Disconnect::Io(e.to_string()))?;
            backoff = MIN_BACKOFF;
            session(&proxy, stream, &passphrase).await
        };
        let outcome = tokio::select! {
            _ = stop.cancelled() => return Ok(()),
            o = session => o,
        };
        match outcome {
            Err(Disconnect::Rejected(reason)) => return Err(AgentError::Rejected(reason)),
            Err(Disconnect::Io(e)) => debug!(%controller, "control connection lost: {e}"),
            Ok(()) => debug!(%controller, "controller closed the connection"),
        }
        tokio::select! {
            _ = stop.cancelled() => return Ok(()),
            _ = tokio::time::sleep(backoff) => {}
        }
        backoff = (backoff * 2).min(MAX_BACKOFF);
    }
}

enum Disconnect {
    Io(String),
    Rejected(String),
}

async fn session(proxy: &Proxy, stream: TcpStream, passphrase: &str) -> Result<(), Disconnect> {
    let io_err = |e: std::io::Error| Disconnect::Io(e.to_string());
    let node_id = proxy.node_id().to_string();
    let (r, mut w) = stream.into_split();
    let hello = ControlMsg::Hello { node_id: node_id.clone(), passphrase: passphrase.to_string() };
    w.write_all(encode_control(&hello).as_bytes()).await.map_err(io_err)?;
    info!(%node_id, "connected to controller");

    let mut lines = BufReader::new(r).lines();
    while let Some(line) = lines.next_line().await.map_err(io_err)? {
        match decode_control(&line) {
            Ok(ControlMsg::ConfigPush { version, body, .. }) => {
                match proxy.swap_config(*body).await {
                    Ok(report) if report.applied => info!(
                        old = report.old_version,
                        new = report.new_version,
                        drained = report.drained_sessions,
                        forced = report.forced_sessions,
                        "config applied"
                    ),
                    Ok(_) => debug!(version, "stale push ignored"),
                    Err(e) => warn!(version, "push refused: {e}"),
                }
                let ack = ControlMsg::Ack { node_id: node_id.clone(), version: proxy.config_version() };
                w.write_all(encode_control(&ack).as_bytes()).await.map_err(io_err)?;
            }
            Ok(ControlMsg::Reject { reason, .. }) => return Err(Disconnect::Rejected(reason)),
            Ok(other) => debug!("ignoring {other:?}"),
            Err(e) => warn!("bad control line: {e}"),
        }
    }
    Ok(())
}
