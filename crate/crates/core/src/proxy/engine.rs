use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arc_swap::ArcSwap;
use serde::Serialize;
use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::Notify;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info};

use super::lb::ClusterState;
use super::session::{handle_http, handle_tcp_forward, run_udp_ingest};
use super::stats::{Stats, StatsSnapshot};
use crate::admin::{self, AdminRequest, AdminResponse};
use crate::model::{validate_config, ListenerMode, ListenerSpec, NodeConfig, ValidationReport};
use crate::policy::PolicyTable;

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("config rejected:\n{0}")]
    Invalid(ValidationReport),
    #[error("config is for node {got:?}, this is {expected:?}")]
    WrongNode { expected: String, got: String },
    #[error("cannot bind listener {key}: {source}")]
    Bind { key: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapReport {
    pub old_version: u64,
    pub new_version: u64,
    /// Sessions of the old config still open when the swap took effect.
    pub drained_sessions: usize,
    /// Of those, the ones still open at the end of the drain and closed.
    pub forced_sessions: usize,
    #[serde(with = "crate::model::duration_ms")]
    pub duration: Duration,
    /// False for stale pushes, which change nothing.
    pub applied: bool,
}

/// Stable identity of a listener across configs.
pub fn listener_key(spec: &ListenerSpec) -> String {
    let mode = match spec.mode {
        ListenerMode::Http => "http",
        ListenerMode::TcpForward => "tcp_forward",
        ListenerMode::UdpIngest => "udp_ingest",
    };
    format!("{mode}/{}", spec.bind.authority())
}

/// One activated config with the state its sessions share.
pub(crate) struct Epoch {
    pub cfg: Arc<NodeConfig>,
    clusters: HashMap<String, Arc<ClusterState>>,
    pub policies: PolicyTable,
    pub cancel: CancellationToken,
    active: AtomicUsize,
    idle: Notify,
}

impl Epoch {
    fn compile(cfg: NodeConfig) -> Self {
        let clusters = cfg.clusters.iter().map(|c| (c.name.clone(), Arc::new(ClusterState::new(c.clone())))).collect();
        Self {
            policies: PolicyTable::new(&cfg.policies),
            cfg: Arc::new(cfg),
            clusters,
            cancel: CancellationToken::new(),
            active: AtomicUsize::new(0),
            idle: Notify::new(),
        }
    }

    pub fn cluster(&self, name: &str) -> Option<Arc<ClusterState>> {
        self.clusters.get(name).cloned()
    }

    pub fn listener(&self, key: &str) -> Option<&ListenerSpec> {
        self.cfg.listeners.iter().find(|l| listener_key(l) == key)
    }

    pub fn session(self: &Arc<Self>) -> SessionGuard {
        self.active.fetch_add(1, Ordering::SeqCst);
        SessionGuard(self.clone())
    }

    fn active(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    async fn wait_idle(&self) {
        loop {
            let notified = self.idle.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.active() == 0 {
                return;
            }
            notified.await;
        }
    }
}

/// Keeps an epoch's session count up while a session runs.
pub(crate) struct SessionGuard(Arc<Epoch>);

impl SessionGuard {
    pub fn epoch(&self) -> &Arc<Epoch> {
        &self.0
    }
}

impl Drop for SessionGuard {
    fn drop(&mut self) {
        if self.0.active.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.0.idle.notify_waiters();
        }
    }
}

struct RunningListener {
    local_addr: SocketAddr,
    cancel: CancellationToken,
}

pub(crate) struct Shared {
    node_id: String,
    epoch: ArcSwap<Epoch>,
    pub stats: Stats,
    swap_lock: tokio::sync::Mutex<()>,
    listeners: Mutex<HashMap<String, RunningListener>>,
    shutdown: CancellationToken,
}

impl Shared {
    pub fn epoch(&self) -> Arc<Epoch> {
        self.epoch.load_full()
    }
}

/// The dataplane engine of one node. Cloning gives another handle to the
/// same proxy; `shutdown` stops it for all handles.
#[derive(Clone)]
pub struct Proxy {
    shared: Arc<Shared>,
}

impl Proxy {
    /// A proxy with no listeners at config version 0.
    pub fn new(node_id: impl Into<String>) -> Self {
        let node_id = node_id.into();
        let epoch = Epoch::compile(NodeConfig::empty(node_id.clone()));
        Self {
            shared: Arc::new(Shared {
                node_id,
                epoch: ArcSwap::from_pointee(epoch),
                stats: Stats::default(),
                swap_lock: tokio::sync::Mutex::new(()),
                listeners: Mutex::new(HashMap::new()),
                shutdown: CancellationToken::new(),
            }),
        }
    }

    pub async fn start(cfg: NodeConfig) -> Result<Self, SwapError> {
        let proxy = Proxy::new(cfg.node_id.clone());
        proxy.swap_config(cfg).await?;
        Ok(proxy)
    }

    pub fn node_id(&self) -> &str {
        &self.shared.node_id
    }

    pub fn config_version(&self) -> u64 {
        self.shared.epoch.load().cfg.version
    }

    pub fn config(&self) -> Arc<NodeConfig> {
        self.shared.epoch.load().cfg.clone()
    }

    pub fn stats_snapshot(&self) -> StatsSnapshot {
        self.shared.stats.snapshot(&self.shared.node_id, self.config_version())
    }

    /// Bound address of the listener with `port_tag`, if running.
    pub fn listener_addr(&self, port_tag: &str) -> Option<SocketAddr> {
        let cfg = self.config();
        let spec = cfg.listeners.iter().find(|l| l.port_tag == port_tag)?;
        self.shared.listeners.lock().unwrap().get(&listener_key(spec)).map(|l| l.local_addr)
    }

    pub fn shutdown_token(&self) -> CancellationToken {
        self.shared.shutdown.clone()
    }

    /// Stops listeners and closes every session.
    pub fn shutdown(&self) {
        self.shared.shutdown.cancel();
        self.shared.epoch.load().cancel.cancel();
        for (_, l) in self.shared.listeners.lock().unwrap().drain() {
            l.cancel.cancel();
        }
    }

    /// Activates `new` atomically: sessions started afterwards see only the
    /// new routes and clusters. Sessions of the previous config keep running
    /// for up to the new config's drain time and are then closed. Pushes
    /// whose version is not newer than the active one are ignored.
    pub async fn swap_config(&self, new: NodeConfig) -> Result<SwapReport, SwapError> {
        let shared = &self.shared;
        let _serial = shared.swap_lock.lock().await;
        let start = Instant::now();
        let old = shared.epoch();
        let old_version = old.cfg.version;
        if new.version <= old_version {
            return Ok(SwapReport {
                old_version,
                new_version: new.version,
                drained_sessions: 0,
                forced_sessions: 0,
                duration: start.elapsed(),
                applied: false,
            });
        }
        if new.node_id != shared.node_id {
            return Err(SwapError::WrongNode { expected: shared.node_id.clone(), got: new.node_id });
        }
        let report = validate_config(&new);
        if !report.ok {
            return Err(SwapError::Invalid(report));
        }

        let wanted: Vec<(String, ListenerSpec)> = new.listeners.iter().map(|l| (listener_key(l), l.clone())).collect();
        let mut started = Vec::new();
        for (key, spec) in &wanted {
            if shared.listeners.lock().unwrap().contains_key(key) {
                continue;
            }
            match self.bind_listener(key, spec).await {
                Ok(l) => started.push((key.clone(), l)),
                Err(source) => {
                    for (_, l) in started {
                        l.cancel.cancel();
                    }
                    return Err(SwapError::Bind { key: key.clone(), source });
                }
            }
        }

        let drain_time = new.drain_time;
        let new_version = new.version;
        shared.epoch.store(Arc::new(Epoch::compile(new)));
        shared.stats.swaps.inc();
        {
            let mut running = shared.listeners.lock().unwrap();
            running.extend(started);
            running.retain(|key, l| {
                let keep = wanted.iter().any(|(k, _)| k == key);
                if !keep {
                    l.cancel.cancel();
                }
                keep
            });
        }
        info!(node = %shared.node_id, old_version, new_version, "config activated");

        let drained_sessions = old.active();
        if drained_sessions > 0 {
            let _ = tokio::time::timeout(drain_time, old.wait_idle()).await;
        }
        let forced_sessions = old.active();
        old.cancel.cancel();
        if forced_sessions > 0 {
            debug!(forced_sessions, "drain time over, closing sessions");
        }
        Ok(SwapReport {
            old_version,
            new_version,
            drained_sessions,
            forced_sessions,
            duration: start.elapsed(),
            applied: true,
        })
    }

    async fn bind_listener(&self, key: &str, spec: &ListenerSpec) -> io::Result<RunningListener> {
        let addr = spec.bind.resolve().await?;
        let cancel = self.shared.shutdown.child_token();
        let shared = self.shared.clone();
        let key = key.to_string();
        let local_addr = match spec.mode {
            ListenerMode::Http | ListenerMode::TcpForward => {
                let listener = TcpListener::bind(addr).await?;
                let local = listener.local_addr()?;
                let c = cancel.clone();
                tokio::spawn(async move {
                    tokio::select! {
                        _ = accept_loop(listener, key, shared) => {}
                        _ = c.cancelled() => {}
                    }
                });
                local
            }
            ListenerMode::UdpIngest => {
                let sock = Arc::new(UdpSocket::bind(addr).await?);
                let local = sock.local_addr()?;
                let c = cancel.clone();
                tokio::spawn(async move {
                    tokio::select! {
                        _ = run_udp_ingest(sock, key, shared) => {}
                        _ = c.cancelled() => {}
                    }
                });
                local
            }
        };
        Ok(RunningListener { local_addr, cancel })
    }

    /// Serves `GET /stats` and `GET /config_version` until shutdown.
    pub async fn serve_admin(&self, listener: TcpListener) {
        let proxy = self.clone();
        let cancel = self.shared.shutdown.clone();
        admin::serve(listener, cancel, move |req: AdminRequest| {
            let proxy = proxy.clone();
            async move {
                match (req.method.as_str(), req.path.as_str()) {
                    ("GET", "/stats") => AdminResponse::ok(serde_json::to_value(proxy.stats_snapshot()).unwrap()),
                    ("GET", "/config_version") => AdminResponse::ok(serde_json::json!({
                        "node_id": proxy.node_id(),
                        "version": proxy.config_version(),
                    })),
                    _ => AdminResponse::not_found(),
                }
            }
        })
        .await
    }
}

async fn accept_loop(listener: TcpListener, key: String, shared: Arc<Shared>) {
    let lstats = shared.stats.listener(&key);
    loop {
        let (stream, _) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                debug!("accept on {key}: {e}");
                // fd exhaustion and similar: back off briefly
                tokio::time::sleep(Duration::from_millis(10)).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let epoch = shared.epoch();
        let Some(spec) = epoch.listener(&key).cloned() else { continue };
        lstats.accepted.inc();
        let guard = epoch.session();
        let (shared, lstats) = (shared.clone(), lstats.clone());
        tokio::spawn(async move {
            lstats.active.inc();
            let epoch = guard.epoch().clone();
            let cancel = epoch.cancel.clone();
            let work = async {
                match spec.mode {
                    ListenerMode::Http => handle_http(stream, spec, epoch, shared, lstats.clone()).await,
                    _ => handle_tcp_forward(stream, spec, epoch, shared, lstats.clone()).await,
                }
            };
            tokio::select! {
                _ = work => {}
                _ = cancel.cancelled() => {}
            }
            lstats.active.dec();
            drop(guard);
        });
    }
}
