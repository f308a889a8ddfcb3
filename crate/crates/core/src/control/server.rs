use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use super::auth::{authenticate, Secrets};
use super::registry::{NodeRegistry, PushResult};
use super::store::ConfigStore;
use crate::admin::{self, AdminRequest, AdminResponse};
use crate::wire::{decode_control, encode_control, ControlMsg};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(5);
const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct ControllerOptions {
    pub store_dir: PathBuf,
    pub listen: SocketAddr,
    pub secrets: Secrets,
    pub poll_interval: Duration,
    /// Where to serve `GET /nodes` and `POST /update/<node_id>`.
    pub admin: Option<SocketAddr>,
}

/// Config store, registry and push logic; shared by all connection tasks.
pub struct Controller {
    store: Mutex<ConfigStore>,
    registry: NodeRegistry,
    secrets: Secrets,
}

impl Controller {
    pub fn new(store: ConfigStore, secrets: Secrets) -> Self {
        Self { store: Mutex::new(store), registry: NodeRegistry::default(), secrets }
    }

    pub fn registry(&self) -> &NodeRegistry {
        &self.registry
    }

    fn push_stored(&self, node_id: &str) -> PushResult {
        let Some(cfg) = self.store.lock().unwrap().get(node_id) else {
            return if self.registry.is_connected(node_id) { PushResult::UpToDate } else { PushResult::NotConnected };
        };
        self.registry.push_if_newer(node_id, cfg.version, || ControlMsg::ConfigPush {
            node_id: node_id.to_string(),
            version: cfg.version,
            body: Box::new((*cfg).clone()),
        })
    }

    /// One poll cycle: rescan the store and push to every connected node
    /// that is behind. Returns the number of pushes sent.
    pub fn poll_and_push(&self) -> usize {
        if let Err(e) = self.store.lock().unwrap().reload() {
            warn!("store rescan failed: {e}");
        }
        self.registry.connected().iter().filter(|id| self.push_stored(id) == PushResult::Pushed).count()
    }

    /// Pushes to one node now, without waiting for the next poll.
    pub fn request_update(&self, node_id: &str) -> PushResult {
        if !self.registry.is_connected(node_id) {
            return PushResult::NotConnected;
        }
        self.store.lock().unwrap().reload_node(node_id);
        self.push_stored(node_id)
    }
}

/// A running controller; dropping it stops the listener, poll loop and
/// connections.
pub struct ControllerHandle {
    pub addr: SocketAddr,
    pub admin_addr: Option<SocketAddr>,
    controller: Arc<Controller>,
    cancel: CancellationToken,
}

impl ControllerHandle {
    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn shutdown(&self) {
        self.cancel.cancel();
    }

    pub async fn stopped(&self) {
        self.cancel.cancelled().await
    }
}

impl Drop for ControllerHandle {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

pub async fn start_controller(opts: ControllerOptions) -> io::Result<ControllerHandle> {
    let store = ConfigStore::open(&opts.store_dir)?;
    let controller = Arc::new(Controller::new(store, opts.secrets));
    let cancel = CancellationToken::new();
    let listener = TcpListener::bind(opts.listen).await?;
    let addr = listener.local_addr()?;

    tokio::spawn(accept_loop(listener, controller.clone(), cancel.clone()));
    tokio::spawn({
        let (controller, cancel) = (controller.clone(), cancel.clone());
        async move {
            let mut tick = tokio::time::interval(opts.poll_interval);
            tick.tick().await;
            loop {
                tokio::select! {
                    _ = cancel.cancelled() => return,
                    _ = tick.tick() => {}
                }
                let pushes = controller.poll_and_push();
                if pushes > 0 {
                    info!(pushes, "poll cycle pushed configs");
                }
            }
        }
    });

    let admin_addr = match opts.admin {
        Some(a) => {
            let l = TcpListener::bind(a).await?;
            let local = l.local_addr()?;
            let c = controller.clone();
            tokio::spawn(admin::serve(l, cancel.clone(), move |req: AdminRequest| {
                let c = c.clone();
                async move { admin_route(&c, req) }
            }));
            Some(local)
        }
        None => None,
    };
    info!(%addr, "controller listening");
    Ok(ControllerHandle { addr, admin_addr, controller, cancel })
}

fn admin_route(c: &Controller, req: AdminRequest) -> AdminResponse {
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/nodes") => AdminResponse::ok(serde_json::to_value(c.registry.view()).unwrap()),
        ("POST", path) => match path.strip_prefix("/update/") {
            Some(id) if !id.is_empty() => {
                let result = c.request_update(id);
                AdminResponse::ok(serde_json::json!({ "node_id": id, "result": result }))
            }
            _ => AdminResponse::not_found(),
        },
        _ => AdminResponse::not_found(),
    }
}

async fn accept_loop(listener: TcpListener, controller: Arc<Controller>, cancel: CancellationToken) {
    loop {
        let stream = tokio::select! {
            _ = cancel.cancelled() => return,
            r = listener.accept() => match r {
                Ok((s, _)) => s,
                Err(_) => continue,
            },
        };
        tokio::spawn(serve_connection(stream, controller.clone(), cancel.clone()));
    }
}

async fn serve_connection(stream: TcpStream, controller: Arc<Controller>, cancel: CancellationToken) {
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    let hello = match tokio::time::timeout(HELLO_TIMEOUT, lines.next_line()).await {
        Ok(Ok(Some(line))) => decode_control(&line),
        _ => return,
    };
    let (node_id, passphrase) = match hello {
        Ok(ControlMsg::Hello { node_id, passphrase }) => (node_id, passphrase),
        other => {
            let reason = match other {
                Err(e) => e.to_string(),
                Ok(_) => "expected hello".to_string(),
            };
            let reject = ControlMsg::Reject { node_id: String::new(), reason };
            let _ = w.write_all(encode_control(&reject).as_bytes()).await;
            return;
        }
    };
    if let Err(reason) = authenticate(&node_id, &passphrase, &controller.secrets) {
        warn!(%node_id, "rejecting node: {reason}");
        let reject = ControlMsg::Reject { node_id, reason: reason.to_string() };
        let _ = w.write_all(encode_control(&reject).as_bytes()).await;
        let _ = w.shutdown().await;
        return;
    }

    let (generation, mut outbox) = controller.registry.register(&node_id);
    info!(%node_id, "node connected");
    let writer = tokio::spawn(async move {
        while let Some(msg) = outbox.recv().await {
            if w.write_all(encode_control(&msg).as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = w.shutdown().await;
    });
    controller.push_stored(&node_id);

    loop {
        let line = tokio::select! {
            _ = cancel.cancelled() => break,
            l = lines.next_line() => match l {
                Ok(Some(l)) => l,
                _ => break,
            },
        };
        controller.registry.touch(&node_id, generation);
        match decode_control(&line) {
            Ok(ControlMsg::Ack { version, .. }) => {
                debug!(%node_id, version, "ack");
                controller.registry.ack(&node_id, generation, version);
            }
            Ok(ControlMsg::RequestUpdate { node_id: target }) => {
                let result = controller.request_update(&target);
                debug!(%node_id, %target, ?result, "update requested");
            }
            Ok(other) => debug!(%node_id, "ignoring {other:?}"),
            Err(e) => warn!(%node_id, "bad control line: {e}"),
        }
    }
    controller.registry.evict(&node_id, generation);
    writer.abort();
    info!(%node_id, "node disconnected");
}
