use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::SystemTime;

use serde::Serialize;
use tokio::sync::mpsc;

use crate::wire::ControlMsg;

struct Entry {
    generation: u64,
    tx: mpsc::UnboundedSender<ControlMsg>,
    acked_version: u64,
    in_flight: Option<u64>,
    last_seen: SystemTime,
}

/// What the registry shows about one connected node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeView {
    pub acked_version: u64,
    pub in_flight: Option<u64>,
    pub last_seen_unix_ms: u64,
}

/// Connected proxies. A node has at most one live connection: registering
/// again replaces, and thereby closes, the previous one.
#[derive(Default)]
pub struct NodeRegistry {
    nodes: Mutex<HashMap<String, Entry>>,
    next_generation: Mutex<u64>,
}

impl NodeRegistry {
    /// Registers a connection; the returned receiver feeds its writer.
    pub fn register(&self, node_id: &str) -> (u64, mpsc::UnboundedReceiver<ControlMsg>) {
        let generation = {
            let mut g = self.next_generation.lock().unwrap();
            *g += 1;
            *g
        };
        let (tx, rx) = mpsc::unbounded_channel();
        let entry = Entry { generation, tx, acked_version: 0, in_flight: None, last_seen: SystemTime::now() };
        self.nodes.lock().unwrap().insert(node_id.to_string(), entry);
        (generation, rx)
    }

    /// Removes the node if `generation` is still its live connection.
    pub fn evict(&self, node_id: &str, generation: u64) {
        let mut nodes = self.nodes.lock().unwrap();
        if nodes.get(node_id).is_some_and(|e| e.generation == generation) {
            nodes.remove(node_id);
        }
    }

    pub fn is_connected(&self, node_id: &str) -> bool {
        self.nodes.lock().unwrap().contains_key(node_id)
    }

    pub fn touch(&self, node_id: &str, generation: u64) {
        if let Some(e) = self.nodes.lock().unwrap().get_mut(node_id).filter(|e| e.generation == generation) {
            e.last_seen = SystemTime::now();
        }
    }

    /// Records an ack; acked versions never go down.
    pub fn ack(&self, node_id: &str, generation: u64, version: u64) {
        if let Some(e) = self.nodes.lock().unwrap().get_mut(node_id).filter(|e| e.generation == generation) {
            e.acked_version = e.acked_version.max(version);
            if e.in_flight.is_some_and(|v| v <= e.acked_version) {
                e.in_flight = None;
            }
            e.last_seen = SystemTime::now();
        }
    }

    /// Sends `cfg_version`'s push built by `make` unless the node already
    /// acked or is applying that version or a newer one.
    pub fn push_if_newer(&self, node_id: &str, cfg_version: u64, make: impl FnOnce() -> ControlMsg) -> PushResult {
        let mut nodes = self.nodes.lock().unwrap();
        let Some(e) = nodes.get_mut(node_id) else { return PushResult::NotConnected };
        if cfg_version <= e.acked_version.max(e.in_flight.unwrap_or(0)) {
            return PushResult::UpToDate;
        }
        if e.tx.send(make()).is_err() {
            nodes.remove(node_id);
            return PushResult::NotConnected;
        }
        e.in_flight = Some(cfg_version);
        PushResult::Pushed
    }

    pub fn send(&self, node_id: &str, msg: ControlMsg) -> bool {
        self.nodes.lock().unwrap().get(node_id).is_some_and(|e| e.tx.send(msg).is_ok())
    }

    pub fn connected(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.nodes.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn acked_version(&self, node_id: &str) -> Option<u64> {
        self.nodes.lock().unwrap().get(node_id).map(|e| e.acked_version)
    }

    pub fn view(&self) -> BTreeMap<String, NodeView> {
        self.nodes
            .lock()
            .unwrap()
            .iter()
            .map(|(id, e)| {
                let ms = e.last_seen.duration_since(SystemTime::UNIX_EPOCH).unwrap_or_default().as_millis() as u64;
                (id.clone(), NodeView { acked_version: e.acked_version, in_flight: e.in_flight, last_seen_unix_ms: ms })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PushResult {
    Pushed,
    NotConnected,
    UpToDate,
}
